"""Tree-Transformer power allocation for cell-free massive MIMO.

Modules
-------
sim
    Channel statistics, MMSE estimation and combining, SINR moments.
oracle
    Max-min fairness power control by bisection.
dataset
    Labeled scenario generation, normalization and JSONL persistence.
autodiff
    Reverse-mode automatic differentiation on numpy arrays, AdamW, checkpoints.
model
    Tree compressor, single-token root encoder, decoder and rescaler.
trainer
    Mini-batch training loop.
evalbench
    Power CDFs, min-SE gaps, latency and operation counts.
cli
    ``tree-power`` command-line pipeline.
"""

__version__ = "0.1.0"
