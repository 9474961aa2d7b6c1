"""Desk-scale federated averaging simulator for non-IID client data."""
