"""Language models for code-switched text: dual LSTM language models and
same-source pretraining with SeqGAN-generated text."""

__version__ = "0.1.0"
