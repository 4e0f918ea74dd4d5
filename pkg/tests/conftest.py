import numpy as np
import pytest

from segloop import loop
from segloop.synthetic import disk_corpus, truth_labelmap
from segloop.unet import UNetConfig


@pytest.fixture(scope="session")
def disk_model():
    """A small model fine-tuned on 64 px disk tiles (mixed contrast), shared
    by every test that needs real predictions. Trains once per session."""
    tiles = (disk_corpus(24, seed=11, size=64, contrast=1.0)
             + disk_corpus(24, seed=12, size=64, contrast=0.35))
    net = UNetConfig(depth=3, base_channels=4, out_channels=3)
    base = loop.pretrain([img for img, _ in tiles],
                         loop.TrainConfig(epochs=2, batch_size=8, seed=5), net=net)
    samples = [(img, truth_labelmap(t)) for img, t in tiles]
    ckpt = loop.finetune(base, samples,
                         loop.TrainConfig(edgeweight=2, epochs=25, batch_size=8, seed=5))
    return ckpt


@pytest.fixture(scope="session")
def disk_model_f_score(disk_model):
    held = (disk_corpus(6, seed=77, size=64, contrast=1.0)
            + disk_corpus(6, seed=78, size=64, contrast=0.35))
    tp = fp = fn = 0
    for img, truth in held:
        _, mask = loop.predict_tile(disk_model, img)
        tp += np.sum(mask & truth)
        fp += np.sum(mask & ~truth)
        fn += np.sum(~mask & truth)
    return 2 * tp / (2 * tp + fp + fn)
