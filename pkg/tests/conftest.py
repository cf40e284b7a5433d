"""Shared fixtures; the expensive reference training run happens once."""

import time
from types import SimpleNamespace

import pytest

from promptlab.cli import reference_config, to_model_config
from promptlab.datagen import generate_dataset, held_out, sample_few_shot
from promptlab.encoders import EncoderState, PromptSet
from promptlab.tuning import train


@pytest.fixture(scope="session")
def reference_run():
    """The verified desk-scale run: 4 synthetic classes, 16 shots,
    200 steps.  Shared by the acceptance criteria that need a trained
    model (branch isolation, convergence, segmentation direction)."""
    cfg = reference_config()
    mcfg = to_model_config(cfg)
    ds = generate_dataset(cfg.n_classes, cfg.per_class, cfg.image_size,
                          cfg.data_seed, cfg.family_offset)
    train_set = sample_few_shot(ds, cfg.shots, ds.base_classes,
                                seed=cfg.data_seed)
    state = EncoderState.initialize(mcfg, seed=cfg.seed)
    prompts0 = PromptSet.initialize(mcfg, seed=cfg.seed + 1)
    state_bytes_before = state.to_bytes()
    started = time.time()
    result = train(train_set, [ds.class_names[c] for c in ds.base_classes],
                   prompts0, mcfg, state, epochs=cfg.epochs,
                   batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    elapsed = time.time() - started
    return SimpleNamespace(
        cfg=cfg, mcfg=mcfg, dataset=ds, train_set=train_set,
        held_out=held_out(ds, train_set), state=state, prompts0=prompts0,
        state_bytes_before=state_bytes_before, result=result,
        elapsed=elapsed,
    )
