"""Few-shot smart-home routine forecasting: CASAS ingest, Markov priors, retrieval-augmented prompts, DTW scoring."""

__version__ = "0.1.0"
