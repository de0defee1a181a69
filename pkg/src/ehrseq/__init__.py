"""Hourly in-hospital mortality prediction from raw ICU event streams.

Pipeline: ingest -> tokenizer -> model/optim -> train -> evaluate, plus a
synthetic cohort generator (synth) and the ``ehrseq`` command line (cli).
"""

__version__ = "0.1.0"
