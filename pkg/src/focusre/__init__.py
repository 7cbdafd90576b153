"""Joint clinical NER and relation classification with focused attention masks."""

__version__ = "0.1.0"
