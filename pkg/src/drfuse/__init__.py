"""Disentangled multimodal fusion with missing-modality handling."""
