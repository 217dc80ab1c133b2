import numpy as np


def random_tokens(seed, batch, seq, vocab):
    return np.random.default_rng(seed).integers(0, vocab, size=(batch, seq))
