"""flowharm: flow-guided unsupervised image harmonization.

A normalizing flow learns the source-site image density with exact
likelihoods; a lightweight harmonizer network (per-image gain, per-pixel
bias) is then adapted at test time so unseen-site images land back in that
density, evaluated through a frozen downstream segmenter.
"""

__version__ = "0.1.0"
