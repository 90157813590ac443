"""GP-GNN: relation extraction with graph neural networks whose edge
transition matrices are generated from sentence context."""

__version__ = "0.1.0"
