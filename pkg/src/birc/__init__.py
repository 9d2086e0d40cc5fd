"""birc: variational Bayesian implicit-representation codec.

Overfit a small Bayesian SIREN to a signal, train shared priors and
transforms over a corpus, and encode posterior samples into a deterministic
bitstream with relative entropy coding.
"""

__version__ = "0.1.0"

from .codec import CodeSettings, SignalDataset, compress, decompress, load_signal, psnr, save_signal
from .trainer import SharedModel, TrainConfig, train

__all__ = [
    "CodeSettings", "SignalDataset", "SharedModel", "TrainConfig",
    "compress", "decompress", "load_signal", "psnr", "save_signal", "train",
]
