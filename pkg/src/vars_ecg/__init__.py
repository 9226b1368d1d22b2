"""Graph representation learning for heterogeneous ECG recordings.

Records are cut into fixed-length intervals that become graph nodes, edges
come from multi-head attention, and a GIN encoder is pretrained with masked
reconstruction, a conditioned subgraph extractor and a contrastive loss.
The same subgraph extractor later explains classifier decisions.
"""
from __future__ import annotations

__version__ = "0.1.0"
