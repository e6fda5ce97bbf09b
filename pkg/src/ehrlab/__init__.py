"""Desk-scale EHR sequence-model laboratory."""
