"""Multimodal sleep-apnea detection with anomaly-aware gated fusion.

Per-modality transformer autoencoders with classification heads are trained
first; a gated fusion head then combines the frozen latents, weighting each
modality by how anomalous its reconstruction residual looks. Includes the
signal-corruption tooling (channel omission, SNR-targeted noise) and the
evaluation harness for missing/noisy-modality experiments on synthetic data.
"""

__version__ = "0.1.0"
