"""Noisy student-teacher adaptation at inference for CTC acoustic models."""
