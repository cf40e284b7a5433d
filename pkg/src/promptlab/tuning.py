"""Three-branch forward pass, the full loss stack, and prompt optimization.

The image forward yields three representations: the prompted class token
(global), the projected final-layer prompt outputs (augmented), and a
promptless encode (vanilla).  Only prompt parameters receive gradients;
vanilla quantities enter the losses as constants, which the train loop
exploits by caching them once per run.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import Subset, _stream, tokenize_template
from .encoders import (EncoderState, ModelConfig, PromptSet, embed_image,
                       embed_text, encode_image_prompted, encode_text_prompted,
                       project_augmented, project_global, project_text)

MOMENTUM = 0.9


@dataclass
class Batch:
    images: np.ndarray   # (B, size, size)
    labels: np.ndarray   # (B,) indices into the bank's class list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must align")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_subset(cls, subset: Subset) -> "Batch":
        return cls(images=subset.images, labels=subset.labels)


@dataclass
class BranchOutputs:
    global_rep: Tensor             # x_p, unit (d_shared,)
    augmented_reps: Optional[Tensor]  # (V, d_shared) unit rows, None if V=0
    vanilla_rep: Tensor            # x, unit (d_shared,), prompt-independent


@dataclass
class TextBank:
    prompted: Tensor   # (N_c, d_shared) unit rows, graph-carrying
    vanilla: Tensor    # (N_c, d_shared) unit rows, constant
    class_names: tuple

    @property
    def n_classes(self) -> int:
        return self.prompted.shape[0]


_EMPTY_PROMPTS = PromptSet([], [])


def _text_rep(name: str, prompts: PromptSet, cfg: ModelConfig,
              state: EncoderState) -> Tensor:
    e0, W = embed_text(tokenize_template(name), cfg, state)
    res = encode_text_prompted(e0, W, prompts, cfg, state)
    return project_text(res.eos, state)


def vanilla_text_rows(class_names, cfg: ModelConfig,
                      state: EncoderState) -> Tensor:
    """Promptless text bank rows; constant, safe to cache per run."""
    vcfg = replace(cfg, text_prompt_len=0)
    rows = [_text_rep(n, _EMPTY_PROMPTS, vcfg, state) for n in class_names]
    return Tensor(np.stack([r.data for r in rows]))


def build_text_bank(class_names, prompts: PromptSet, cfg: ModelConfig,
                    state: EncoderState, vanilla_rows=None) -> TextBank:
    rows = [_text_rep(n, prompts, cfg, state) for n in class_names]
    if vanilla_rows is None:
        vanilla_rows = vanilla_text_rows(class_names, cfg, state)
    return TextBank(prompted=ad.stack_rows(rows), vanilla=vanilla_rows,
                    class_names=tuple(class_names))


def vanilla_image_rep(image, cfg: ModelConfig, state: EncoderState) -> Tensor:
    """Promptless global representation; detached constant."""
    vcfg = replace(cfg, visual_prompt_len=0)
    c0, E0 = embed_image(image, vcfg, state)
    res = encode_image_prompted(c0, E0, _EMPTY_PROMPTS, vcfg, state)
    return Tensor(project_global(res.cls, state).data.copy())


def forward_three_branch(image, prompts: PromptSet, cfg: ModelConfig,
                         state: EncoderState) -> BranchOutputs:
    c0, E0 = embed_image(image, cfg, state)
    res = encode_image_prompted(c0, E0, prompts, cfg, state)
    x_p = project_global(res.cls, state)
    aug = project_augmented(res.prompts, state) \
        if cfg.visual_prompt_len > 0 else None
    return BranchOutputs(global_rep=x_p, augmented_reps=aug,
                         vanilla_rep=vanilla_image_rep(image, cfg, state))


# ------------------------------------------------------------------ losses

def _scalars_to_vector(scalars) -> Tensor:
    return ad.concat([ad.reshape(s, (1,)) for s in scalars], axis=0)


def _mean_scalars(scalars) -> Tensor:
    total = scalars[0]
    for s in scalars[1:]:
        total = total + s
    return total * (1.0 / len(scalars))


def loss_ce(x_rep: Tensor, bank: TextBank, y: int, tau: float) -> Tensor:
    """Cross entropy of cosine/tau logits against the prompted text bank."""
    n_c = bank.n_classes
    if not 0 <= int(y) < n_c:
        raise ValueError("class index out of range")
    sims = [ad.cosine_similarity(x_rep, bank.prompted[i]) for i in range(n_c)]
    logits = _scalars_to_vector(sims) * (1.0 / tau)
    return -ad.log_softmax(logits)[int(y)]


def loss_consistency(prompted: Tensor, vanilla: Tensor) -> Tensor:
    return ad.sub(1.0, ad.cosine_similarity(prompted, vanilla))


def sim_augmented(aug_reps: Optional[Tensor], z: Tensor) -> Tensor:
    """Equal-weight mean of per-prompt cosine similarities to one text row."""
    if aug_reps is None or aug_reps.shape[0] == 0:
        raise ValueError("augmented branch requires visual prompts")
    sims = [ad.cosine_similarity(aug_reps[i], z)
            for i in range(aug_reps.shape[0])]
    return _mean_scalars(sims)


def loss_aug_single(aug_reps: Tensor, bank: TextBank, y: int,
                     tau: float) -> Tensor:
    sims = [sim_augmented(aug_reps, bank.prompted[i])
            for i in range(bank.n_classes)]
    logits = _scalars_to_vector(sims) * (1.0 / tau)
    return -ad.log_softmax(logits)[int(y)]


def combine_global(ce, text, img, lambda1: float, lambda2: float):
    """The weighted aggregate: CE + lambda1*text-pair + lambda2*image-pair."""
    return ce + text * lambda1 + img * lambda2


def compute_losses(batch: Batch, prompts: PromptSet, cfg: ModelConfig,
                   state: EncoderState, class_names, *, bank: TextBank = None,
                   vanilla_reps=None, use_aug: bool = True) -> dict:
    """All loss terms of one batch as graph tensors, keyed by name.

    ``use_aug=False`` drops the augmented term from the total (loss
    ablation) without touching the prompt layout.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if bank is None:
        bank = build_text_bank(class_names, prompts, cfg, state)
    if vanilla_reps is None:
        vanilla_reps = [vanilla_image_rep(img, cfg, state)
                        for img in batch.images]
    include_aug = use_aug and cfg.visual_prompt_len > 0

    ce_terms, img_terms, aug_terms = [], [], []
    for b in range(len(batch)):
        c0, E0 = embed_image(batch.images[b], cfg, state)
        res = encode_image_prompted(c0, E0, prompts, cfg, state)
        x_p = project_global(res.cls, state)
        y = int(batch.labels[b])
        ce_terms.append(loss_ce(x_p, bank, y, cfg.temperature))
        img_terms.append(loss_consistency(x_p, vanilla_reps[b]))
        if include_aug:
            aug = project_augmented(res.prompts, state)
            aug_terms.append(loss_aug_single(aug, bank, y, cfg.temperature))

    text_terms = [loss_consistency(bank.prompted[i], bank.vanilla[i])
                  for i in range(bank.n_classes)]

    ce = _mean_scalars(ce_terms)
    text = _mean_scalars(text_terms)
    img = _mean_scalars(img_terms)
    glob = combine_global(ce, text, img, cfg.text_consistency_weight,
                          cfg.image_consistency_weight)
    out = {"ce": ce, "text": text, "img": img, "global": glob}
    if include_aug:
        out["aug"] = _mean_scalars(aug_terms)
        out["total"] = glob + out["aug"]
    else:
        out["aug"] = Tensor(np.asarray(0.0))
        out["total"] = glob
    return out


def loss_global(batch, prompts, cfg, state, class_names, **kw) -> Tensor:
    return compute_losses(batch, prompts, cfg, state, class_names, **kw)["global"]


def loss_aug(batch, prompts, cfg, state, class_names, **kw) -> Tensor:
    if cfg.visual_prompt_len == 0:
        raise ValueError("augmented branch requires visual prompts")
    return compute_losses(batch, prompts, cfg, state, class_names, **kw)["aug"]


def loss_total(batch, prompts, cfg, state, class_names, **kw) -> Tensor:
    return compute_losses(batch, prompts, cfg, state, class_names, **kw)["total"]


# --------------------------------------------------------------- optimizer

class SGDMomentum:
    """Classic heavy-ball SGD: v <- mu*v + g, p <- p - lr*v."""

    def __init__(self, momentum: float = MOMENTUM):
        self.momentum = momentum
        self.velocity = None

    def step(self, values: list, grads: list, lr: float) -> list:
        if self.velocity is None:
            self.velocity = [np.zeros_like(g) for g in grads]
        if len(grads) != len(self.velocity):
            raise ValueError("parameter count changed between steps")
        out = []
        for i, (p, g) in enumerate(zip(values, grads)):
            self.velocity[i] = self.momentum * self.velocity[i] + g
            out.append(p - lr * self.velocity[i])
        return out


def train_step(batch: Batch, prompts: PromptSet, cfg: ModelConfig,
               state: EncoderState, lr: float, class_names, *,
               optimizer: SGDMomentum = None, vanilla_rows=None,
               vanilla_reps=None, use_aug: bool = True):
    """One optimization step; returns (new PromptSet, loss floats dict)."""
    bank = build_text_bank(class_names, prompts, cfg, state,
                           vanilla_rows=vanilla_rows)
    losses = compute_losses(batch, prompts, cfg, state, class_names,
                            bank=bank, vanilla_reps=vanilla_reps,
                            use_aug=use_aug)
    total = losses["total"]
    if not np.isfinite(total.item()):
        raise ValueError("diverged")
    ad.backward(total)

    params = prompts.parameters()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
             for p in params]
    if optimizer is None:
        optimizer = SGDMomentum()
    new_values = optimizer.step([p.data for p in params], grads, lr)
    nv = len(prompts.visual)
    new_prompts = PromptSet(
        [Tensor(v, requires_grad=True) for v in new_values[:nv]],
        [Tensor(v, requires_grad=True) for v in new_values[nv:]])
    stats = {k: float(v.item()) for k, v in losses.items()}
    return new_prompts, stats


# -------------------------------------------------------------- train loop

LOG_COLUMNS = ("epoch", "loss_total", "loss_ce", "loss_text", "loss_img",
               "loss_aug", "base_accuracy")


@dataclass
class TrainResult:
    prompts: PromptSet
    log_rows: list         # one dict per epoch, keys LOG_COLUMNS
    initial: dict          # loss floats on the full train set, untrained
    final: dict            # same after the last step
    steps: int


def global_branch_accuracy(subset: Subset, class_names, prompts: PromptSet,
                           cfg: ModelConfig, state: EncoderState,
                           vanilla_rows=None) -> float:
    if len(subset) == 0:
        raise ValueError("empty evaluation subset")
    bank = build_text_bank(class_names, prompts, cfg, state,
                           vanilla_rows=vanilla_rows)
    bank_rows = bank.prompted.data
    correct = 0
    for img, y in zip(subset.images, subset.labels):
        c0, E0 = embed_image(img, cfg, state)
        res = encode_image_prompted(c0, E0, prompts, cfg, state)
        x = project_global(res.cls, state).data
        if int(np.argmax(bank_rows @ x)) == int(y):
            correct += 1
    return correct / len(subset)


def train(train_set: Subset, class_names, prompts: PromptSet,
          cfg: ModelConfig, state: EncoderState, *, epochs: int,
          batch_size: int, lr: float, seed: int, eval_fn: Callable = None,
          use_aug: bool = True) -> TrainResult:
    """Epoch loop over shuffled minibatches with per-epoch CSV-ready rows."""
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be positive")
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    n = len(train_set)
    if n == 0:
        raise ValueError("empty batch")

    vrows = vanilla_text_rows(class_names, cfg, state)
    vreps = [vanilla_image_rep(img, cfg, state) for img in train_set.images]
    full = Batch.from_subset(train_set)

    def full_losses(p):
        losses = compute_losses(full, p, cfg, state, class_names,
                                vanilla_reps=vreps, use_aug=use_aug)
        return {k: float(v.item()) for k, v in losses.items()}

    initial = full_losses(prompts)
    optimizer = SGDMomentum()
    rows, steps = [], 0
    for epoch in range(epochs):
        order = _stream(seed, 400, epoch).permutation(n)
        sums = {k: 0.0 for k in ("total", "ce", "text", "img", "aug")}
        count = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = Batch(images=train_set.images[idx],
                          labels=train_set.labels[idx])
            prompts, stats = train_step(
                batch, prompts, cfg, state, lr, class_names,
                optimizer=optimizer, vanilla_rows=vrows,
                vanilla_reps=[vreps[i] for i in idx], use_aug=use_aug)
            for k in sums:
                sums[k] += stats[k]
            count += 1
            steps += 1
        if eval_fn is not None:
            acc = float(eval_fn(prompts))
        else:
            acc = global_branch_accuracy(train_set, class_names, prompts,
                                         cfg, state, vanilla_rows=vrows)
        rows.append({
            "epoch": epoch,
            "loss_total": sums["total"] / count,
            "loss_ce": sums["ce"] / count,
            "loss_text": sums["text"] / count,
            "loss_img": sums["img"] / count,
            "loss_aug": sums["aug"] / count,
            "base_accuracy": acc,
        })
    final = full_losses(prompts)
    return TrainResult(prompts=prompts, log_rows=rows, initial=initial,
                       final=final, steps=steps)
