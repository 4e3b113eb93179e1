"""The synthetic toy benchmark used for regression checks and examples."""
from __future__ import annotations

from .data import SynthConfig, synth_generate
from .model import tiny_config
from .train import TrainConfig, fit

TOY_TRAIN = SynthConfig(seed=0, num_images=500, num_classes=10, split="train")
TOY_VAL = SynthConfig(seed=1000, num_images=100, num_classes=10, split="val")
TOY_TRAIN_KW = dict(epochs=50, batch_size=8, base_lr=0.02, input_sizes=[320], eval_interval=5,
                    no_aug_epochs=15, num_threads=1)


def toy_datasets():
    return synth_generate(TOY_TRAIN), synth_generate(TOY_VAL)


def toy_run(seed=0, toggles=None, data=None, out_dir=None, progress=None, **overrides):
    """Train EMDFNet-tiny on the toy set; ``toggles`` maps asm/ehe/siou/res2net to bools."""
    train, val = data if data is not None else toy_datasets()
    mcfg = tiny_config(train.num_classes).with_toggles(**(toggles or {}))
    tcfg = TrainConfig(seed=seed, **{**TOY_TRAIN_KW, **overrides})
    return fit(mcfg, train, tcfg, val, out_dir=out_dir, progress=progress)
