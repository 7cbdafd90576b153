import numpy as np

from focusre.encoder import Encoder, EncoderConfig


def random_encoder(seed=0, vocab_size=20, scale=0.5, **kw):
    """Encoder with larger-than-default random weights so layers mix strongly."""
    cfg = EncoderConfig(vocab_size=vocab_size, **kw)
    enc = Encoder(cfg, np.random.default_rng(seed))
    r = np.random.default_rng(seed + 1000)
    for name, p in enc.params.items():
        if "ln" not in name:
            p.data = r.normal(0, scale, p.shape)
    return enc
