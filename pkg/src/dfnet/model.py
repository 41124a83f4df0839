"""DF-Net parameter container.

The forward computation lives in :mod:`encoder`, :mod:`memory`,
:mod:`fusion` and :mod:`decoder`; this module owns parameter creation,
naming and the per-model random stream.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .corpus import Vocabulary


class DFNet:
    """All trainable groups, keyed by dotted names.

    Recurrent weights of the shared and private cells are kept as separate
    groups (``*.shared.*`` holds one set, ``*.private.*`` stacks ``|D|``) and
    concatenated once per forward pass so all cells advance in one kernel call.
    """

    def __init__(self, vocab: Vocabulary, domains: Sequence[str], config: TrainConfig):
        self.vocab = vocab
        self.domains = list(domains)
        self.config = config
        self.dtype = np.dtype(config.precision)
        self.training = False
        self.rng = np.random.default_rng(config.seed + 1)
        self.params: dict[str, ad.Tensor] = {}
        init = np.random.default_rng(config.seed)
        with ad.precision(self.dtype):
            self._build(init)

    # -- construction -----------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = ad.parameter(arr, name=name)

    def _emb(self, rng, name, rows, cols):
        self._add(name, rng.uniform(-0.1, 0.1, size=(rows, cols)))

    def _weight(self, rng, name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        self._add(name, rng.uniform(-bound, bound, size=shape))

    def _zeros(self, name, shape):
        self._add(name, np.zeros(shape))

    def _linear(self, rng, name, n_in, n_out):
        self._weight(rng, name + ".W", (n_in, n_out), n_in)
        self._zeros(name + ".b", (n_out,))

    def _lstm(self, rng, name, stack, n_in, H):
        self._weight(rng, name + ".W", (stack, n_in + H, 4 * H), n_in + H)
        self._zeros(name + ".b", (stack, 4 * H))

    def _build(self, rng) -> None:
        c = self.config
        V, E, H, D = len(self.vocab), c.embedding, c.hidden, len(self.domains)
        self._emb(rng, "emb", V, E)

        enc_groups = self.encoder_groups()
        for g in enc_groups:
            n = 1 if g == "shared" else D
            self._lstm(rng, f"enc.{g}.fwd", n, E, H)
            self._lstm(rng, f"enc.{g}.bwd", n, E, H)
            self._weight(rng, f"enc.{g}.proj.W", (n, 2 * H, H), 2 * H)
            self._zeros(f"enc.{g}.proj.b", (n, H))
        if "private" in enc_groups:
            if c.dynamic_fusion:
                self._linear(rng, "enc.gate", D * H, D)
            if c.shared_path:
                self._linear(rng, "enc.fuse.1", 2 * H, H)
                self._linear(rng, "enc.fuse.2", H, H)
        self._linear(rng, "enc.attn", H, H)
        self._weight(rng, "enc.attn.v", (H,), H)

        for j in range(1, c.hops + 2):
            self._emb(rng, f"mem.C{j}", V, H)

        for g in self.decoder_groups():
            n = 1 if g == "shared" else D
            self._lstm(rng, f"dec.{g}", n, E, H)
        if "private" in self.decoder_groups():
            if c.dynamic_fusion:
                self._linear(rng, "dec.gate", D * H, D)
            if c.shared_path:
                self._linear(rng, "dec.fuse.1", 2 * H, H)
                self._linear(rng, "dec.fuse.2", H, H)
        self._linear(rng, "dec.query", 2 * H, H)
        self._linear(rng, "dec.out", 2 * H, E)

        if c.adversarial:
            for side in ("enc", "dec"):
                self._weight(rng, f"adv.{side}.conv.W", (3, H, H), 3 * H)
                self._zeros(f"adv.{side}.conv.b", (H,))
                self._linear(rng, f"adv.{side}.head", H, D)

    # -- structure ----------------------------------------------------------

    def encoder_groups(self) -> tuple[str, ...]:
        c = self.config
        groups = ()
        if c.shared_path:
            groups += ("shared",)
        if c.multi_encoder:
            groups += ("private",)
        return groups

    def decoder_groups(self) -> tuple[str, ...]:
        c = self.config
        groups = ()
        if c.shared_path:
            groups += ("shared",)
        if c.multi_decoder:
            groups += ("private",)
        return groups

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def train(self, flag: bool = True) -> "DFNet":
        self.training = flag
        return self

    def eval(self) -> "DFNet":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise KeyError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for k, arr in state.items():
            p = self.params[k]
            if p.shape != arr.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=self.dtype)
            p.zero_grad()

    def stacked(self, prefix: str, groups: Sequence[str], suffix: str) -> ad.Tensor:
        """Shared and private stacks of one recurrent weight, shared first."""
        parts = [self.params[f"{prefix}.{g}{suffix}"] for g in groups]
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


def linear(model: DFNet, name: str, x) -> ad.Tensor:
    return ad.add(ad.matmul(x, model[name + ".W"]), model[name + ".b"])
