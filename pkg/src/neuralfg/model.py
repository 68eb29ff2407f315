"""Neural Fine-Gray model.

``F_r(t|x) = B(E(x))_r * (1 - exp(-t * M_r(t, E(x))))``

``E`` embeds standardised covariates, each ``M_r`` is a positive-weight
network with a softplus head fed with ``(t, E(x))`` and ``B`` is a softmax
head over the risks.  Time enters the monotonic networks rescaled by
``t_scale`` (the largest training event time).  The exact time-derivative of
every CIF comes from the tangent channel of a single forward pass.

Variants:

``nfg``
    one monotonic network per risk.
``monofg``
    a single monotonic network with ``R`` outputs.
``cause_specific``
    no balancing network; ``t * M_r`` is read as the cumulative hazard of
    risk ``r`` and trained with the sum of cause-specific likelihoods.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var
from .layers import Mlp, MlpSpec, init_params, mlp_forward

VARIANTS = ("nfg", "monofg", "cause_specific")


class TimeDomainError(ValueError):
    pass


class SaturationError(ArithmeticError):
    pass


class VariantError(RuntimeError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class CifEvaluation:
    cif: np.ndarray
    survival: np.ndarray
    density: np.ndarray | None = None


@dataclass
class ForwardResult:
    """Tape nodes produced by one forward pass (all shaped ``(N, R)``)."""

    cumulative_hazard: Var
    cif: Var | None


def _as_batch(model: "NfgModel", x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.n_features:
        raise SchemaError(f"model expects {model.n_features} features, got {X.shape[1]}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(~np.isfinite(t)):
        raise TimeDomainError(f"times must be finite and >= 0, got min {np.min(t)}")
    t = np.broadcast_to(t.reshape(-1) if t.ndim else t, (X.shape[0],)).astype(np.float64)
    return X, t, single


@dataclass
class NfgModel:
    embedding: Mlp
    monotonic: list[Mlp]
    balancing: Mlp | None
    variant: str
    t_scale: float
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.t_scale > 0:
            raise ValueError(f"t_scale must be positive, got {self.t_scale}")
        if self.variant == "monofg" and len(self.monotonic) != 1:
            raise ValueError("monofg uses exactly one monotonic network")
        if (self.variant == "cause_specific") != (self.balancing is None):
            raise ValueError("only the cause_specific variant omits the balancing network")

    @classmethod
    def build(cls, n_features: int, n_risks: int, *, layers: int = 2, nodes: int = 50,
              dropout: float = 0.0, variant: str = "nfg", t_scale: float = 1.0,
              mean=None, std=None, rng: np.random.Generator | None = None) -> "NfgModel":
        if n_risks < 1:
            raise ValueError("need at least one risk")
        if layers < 1:
            raise ValueError("need at least one hidden layer")
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = [nodes] * layers
        embedding = init_params(MlpSpec([n_features] + hidden, dropout_rate=dropout,
                                        final_activation="tanh"), rng)
        n_mono, out = (1, n_risks) if variant == "monofg" else (n_risks, 1)
        monotonic = [init_params(MlpSpec([nodes + 1] + hidden + [out], final_activation="softplus",
                                         positive=True), rng)
                     for _ in range(n_mono)]
        balancing = None
        if variant != "cause_specific":
            balancing = init_params(MlpSpec([nodes] + hidden + [n_risks],
                                            final_activation="softmax"), rng)
        mean = np.zeros(n_features) if mean is None else np.asarray(mean, dtype=np.float64)
        std = np.ones(n_features) if std is None else np.asarray(std, dtype=np.float64)
        return cls(embedding, monotonic, balancing, variant, float(t_scale), mean, std)

    # -- structure ------------------------------------------------------

    @property
    def n_features(self) -> int:
        return self.embedding.spec.widths[0]

    @property
    def n_risks(self) -> int:
        if self.variant == "monofg":
            return self.monotonic[0].spec.widths[-1]
        return len(self.monotonic)

    def networks(self) -> list[Mlp]:
        nets = [self.embedding, *self.monotonic]
        if self.balancing is not None:
            nets.append(self.balancing)
        return nets

    def parameters(self) -> list[np.ndarray]:
        return [p for net in self.networks() for p in net.parameters()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "NfgModel":
        return copy.deepcopy(self)

    def set_dropout(self, rate: float) -> None:
        self.embedding.spec.dropout_rate = float(rate)

    # -- forward --------------------------------------------------------

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std

    def forward(self, tape: Tape, X: np.ndarray, t: np.ndarray, *, training: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        """Record the model on ``tape`` with the time input carrying tangent 1."""
        n = X.shape[0]
        time = tape.var(np.asarray(t, dtype=np.float64).reshape(n, 1), tangent=1.0,
                        requires_grad=False)
        t_hat = time * (1.0 / self.t_scale)
        x_tilde = mlp_forward(tape, self.embedding, tape.constant(self.standardize(X)),
                              training=training, rng=rng)
        inputs = tape.concat([t_hat, x_tilde], axis=1)
        outs = [mlp_forward(tape, net, inputs) for net in self.monotonic]
        m = outs[0] if len(outs) == 1 else tape.concat(outs, axis=1)
        hazard = t_hat * m
        if self.balancing is None:
            return ForwardResult(hazard, None)
        weights = mlp_forward(tape, self.balancing, x_tilde)
        return ForwardResult(hazard, weights * (1.0 - (-hazard).exp()))

    def _run(self, x, t):
        X, t, single = _as_batch(self, x, t)
        tape = Tape()
        return tape, self.forward(tape, X, t), single

    # -- evaluation -----------------------------------------------------

    def cif(self, x, t) -> CifEvaluation:
        return self.cif_derivative(x, t, _density=False)

    def cif_derivative(self, x, t, _density: bool = True) -> CifEvaluation:
        """CIFs, survival and (by default) the exact densities ``dF_r/dt``."""
        if self.variant == "cause_specific":
            raise VariantError("the cause_specific variant has no CIFs; use cause_specific_eval")
        _, out, single = self._run(x, t)
        cif = out.cif.value
        density = out.cif.tangent if _density else None
        survival = 1.0 - cif.sum(axis=1)
        if single:
            return CifEvaluation(cif[0], survival[0], None if density is None else density[0])
        return CifEvaluation(cif, survival, density)

    def sub_hazard(self, x, t) -> np.ndarray:
        """Sub-distribution hazards ``h_r = (dF_r/dt) / (1 - F_r)``."""
        ev = self.cif_derivative(x, t)
        if np.any(ev.cif >= 1.0 - 1e-12):
            raise SaturationError("cumulative incidence saturated at 1; sub-hazard undefined")
        return ev.density / (1.0 - ev.cif)

    def cause_specific_eval(self, x, t):
        """``(Lambda_r, lambda_r, exp(-Lambda_r))`` for the cause_specific variant."""
        if self.variant != "cause_specific":
            raise VariantError(f"cause_specific_eval needs the cause_specific variant, not {self.variant}")
        return self.cumulative_hazards(x, t)

    def cumulative_hazards(self, x, t):
        """``t * M_r`` read as a cumulative hazard, for any variant."""
        _, out, single = self._run(x, t)
        big = out.cumulative_hazard.value
        small = out.cumulative_hazard.tangent
        surv = np.exp(-big)
        if single:
            return big[0], small[0], surv[0]
        return big, small, surv

    def risk(self, X, t, r: int) -> np.ndarray:
        """Predicted probability of risk ``r`` (1-based) by ``t``.

        CIF for the competing variants, ``1 - exp(-Lambda_r)`` for cause_specific.
        """
        X = np.atleast_2d(X)
        if self.variant == "cause_specific":
            big, _, _ = self.cumulative_hazards(X, t)
            return 1.0 - np.exp(-big[:, r - 1])
        return self.cif(X, t).cif[:, r - 1]

    def risk_grid(self, X, times, r: int) -> np.ndarray:
        """Risk of ``r`` for every patient at every time: shape ``(N, len(times))``."""
        X = np.atleast_2d(X)
        return np.column_stack([self.risk(X, float(s), r) for s in np.asarray(times)])
