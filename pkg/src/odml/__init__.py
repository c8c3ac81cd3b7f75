"""Online deep metric learning lab.

Trains small embedding networks over a sequence of disjoint class-set tasks
without replaying old samples, using a frozen teacher plus two mutually
distilling students, and reconstructs old-model features via prototype-drift
estimation so earlier tasks keep supervising later stages. Ships synthetic
benchmarks, baselines, and a Recall@1 retrieval harness.
"""

__version__ = "0.1.0"
