"""EEG-to-language-model pipeline: preprocessing, hierarchical encoding,
vector-quantized tokenization, semantic profiling and staged training."""

__version__ = "0.1.0"
