"""Model plugins implementing the additive-noise capability contract."""
