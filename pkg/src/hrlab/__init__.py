"""Offline hierarchical RL laboratory.

Linear tabular MDPs with exact evaluation oracles, skill-segmented offline
datasets, pessimistic value fitting, invertible skill decoders with a
variational baseline, expectile-based high-level training, and the bound /
decomposition audits that tie them together.
"""

__version__ = "0.1.0"
