"""Factor-tuning (FacT) for vision transformers."""
