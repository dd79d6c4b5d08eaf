"""Universal representation matching for few-shot counting."""
