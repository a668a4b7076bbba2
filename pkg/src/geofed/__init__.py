"""geofed: a deterministic simulator for federated training over unpaired
multimodal data silos, aligned through shared-anchor geometry."""

__version__ = "0.1.0"
