"""Multi-hypergraph conversational recommendation: a knowledge-graph encoder
with contrastive pre-training, session and knowledge hypergraph interest
fusion for item ranking, and a transformer response generator."""

__version__ = "0.1.0"
