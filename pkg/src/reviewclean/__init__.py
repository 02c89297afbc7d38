"""reviewclean: semantic cleaning and evaluation for code-review comment
datasets — LLM-backed valid/noisy classification, cleaned and controlled
training splits, BLEU-4 evaluation with significance tests, and
cluster-based quality estimation."""

__version__ = "0.1.0"
