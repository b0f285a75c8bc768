"""
dtskit

Desk-scale diffusion-based target sampling for unsupervised domain
adaptation: pretrain a UDA classifier, pseudo-label the target domain, fit a
class-conditional diffusion model on it, sample synthetic target data and
retrain on the augmented source domain.
"""

__version__ = "1.0.0"
