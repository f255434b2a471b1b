"""Certified data-poisoning analysis for SGD-trained models."""
