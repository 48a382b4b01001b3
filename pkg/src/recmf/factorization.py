"""SGD matrix factorization, plain and with user/decision-factor interactions.

The plain model predicts ``p_u . q_i``.  The interaction model adds, for each
decision factor ``j`` with value ``d_j`` on a record, a term
``p_ud_j . q_d_j`` between a per-(user, factor) vector and a per-value
vector; training fits all blocks jointly by per-sample gradient steps.  A
total dimension ``f`` is split between the blocks by
:func:`split_dimensions`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import _kernels
from .datasets import RATING_MAX, RATING_MIN, Dataset
from .exceptions import DivergenceError
from .factors import AugmentedRatings, FactorSchema

APPLICATIONS = ("extracted-features", "temporal")


@dataclass(frozen=True)
class HyperParameters:
    """Training knobs; defaults follow the benchmark configuration."""

    f: int = 50
    lam: float = 0.01
    gamma: float = 0.01
    eta: float = 0.01
    eta_decay: float = 0.9
    eta_decay_start: int = 5
    max_epochs: int = 120
    patience: int = 3
    init_sigma: float = 0.02
    seed: int = 0
    clamp_predictions: bool = True
    shuffle: bool = True


@dataclass(frozen=True)
class DimensionBudget:
    """How the total latent dimension is split across parameter blocks."""

    f_item: int
    f_factor: tuple[int, ...] = ()

    def __post_init__(self):
        if self.f_item < 0 or any(d < 0 for d in self.f_factor):
            raise ValueError("dimensions must be non-negative")

    @property
    def total(self) -> int:
        return self.f_item + sum(self.f_factor)


def split_dimensions(f: int, application: str) -> DimensionBudget:
    """Split a total dimension ``f`` into per-block shares.

    ``extracted-features`` gives each of the three factors 20% of ``f`` and
    the user-item block 40%; ``temporal`` gives the user-item block 40% and
    the single time factor the remaining 60%.  Rounding remainders are
    absorbed by the user-item block so the shares always sum to ``f`` exactly.
    """
    if application == "extracted-features":
        if f < 5:
            raise ValueError(f"extracted-features needs f >= 5, got {f}")
        per = round(0.2 * f)
        return DimensionBudget(f_item=f - 3 * per, f_factor=(per, per, per))
    if application == "temporal":
        if f < 2:
            raise ValueError(f"temporal needs f >= 2, got {f}")
        fi = round(0.4 * f)
        return DimensionBudget(f_item=fi, f_factor=(f - fi,))
    raise ValueError(f"unknown application {application!r}; expected one of {APPLICATIONS}")


@dataclass
class ModelParams:
    """All parameter blocks in the flat layout the kernels use.

    ``P``/``Q`` are the user-item blocks.  ``UF`` packs every per-(user,
    factor) vector side by side; ``VF`` packs every factor's value table into
    one flat array.  :meth:`user_factor` and :meth:`value_factor` expose the
    conventional per-factor matrices as views.
    """

    budget: DimensionBudget
    cardinalities: tuple[int, ...]
    P: np.ndarray
    Q: np.ndarray
    UF: np.ndarray
    VF: np.ndarray
    col_off: np.ndarray = field(init=False)
    vf_base: np.ndarray = field(init=False)
    fdims: np.ndarray = field(init=False)

    def __post_init__(self):
        fd = np.asarray(self.budget.f_factor, dtype=np.int64)
        self.fdims = fd
        self.col_off = np.concatenate(([0], np.cumsum(fd))).astype(np.int64)
        self.vf_base = np.concatenate(
            ([0], np.cumsum(fd * np.asarray(self.cardinalities, dtype=np.int64)))
        ).astype(np.int64)

    @property
    def n_users(self) -> int:
        return self.P.shape[0]

    @property
    def n_items(self) -> int:
        return self.Q.shape[0]

    @property
    def n_factors(self) -> int:
        return len(self.budget.f_factor)

    def user_factor(self, j: int) -> np.ndarray:
        """The |U| x f_Dj block of per-user vectors for factor j (a view)."""
        return self.UF[:, self.col_off[j] : self.col_off[j + 1]]

    def value_factor(self, j: int) -> np.ndarray:
        """The |D_j| x f_Dj table of value vectors for factor j (a view)."""
        block = self.VF[self.vf_base[j] : self.vf_base[j + 1]]
        return block.reshape(self.cardinalities[j], self.budget.f_factor[j])

    def copy(self) -> "ModelParams":
        return ModelParams(
            budget=self.budget,
            cardinalities=self.cardinalities,
            P=self.P.copy(),
            Q=self.Q.copy(),
            UF=self.UF.copy(),
            VF=self.VF.copy(),
        )

    def all_finite(self) -> bool:
        return bool(
            np.isfinite(self.P).all()
            and np.isfinite(self.Q).all()
            and np.isfinite(self.UF).all()
            and np.isfinite(self.VF).all()
        )


def init_parameters(
    budget: DimensionBudget,
    n_users: int,
    n_items: int,
    cardinalities: Sequence[int] = (),
    sigma: float = 0.02,
    seed: int = 0,
) -> ModelParams:
    """Draw every parameter independently from N(0, sigma^2).

    The draw order (P, Q, then per-user and per-value factor blocks) is part
    of the contract: a model with no factors consumes exactly the same draws
    for P and Q as one with factors, so the two start identically.
    """
    cardinalities = tuple(cardinalities)
    if len(cardinalities) != len(budget.f_factor):
        raise ValueError(
            f"{len(budget.f_factor)} factor dimension(s) but {len(cardinalities)} cardinalit(ies)"
        )
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    fd = budget.f_factor
    P = rng.normal(0.0, sigma, (n_users, budget.f_item))
    Q = rng.normal(0.0, sigma, (n_items, budget.f_item))
    UF = rng.normal(0.0, sigma, (n_users, sum(fd)))
    VF = rng.normal(0.0, sigma, int(sum(c * d for c, d in zip(cardinalities, fd))))
    return ModelParams(budget=budget, cardinalities=cardinalities, P=P, Q=Q, UF=UF, VF=VF)


def effective_eta(hp: HyperParameters, epoch_index: int) -> float:
    """Interaction-block learning rate for a 1-based epoch index.

    Decays geometrically once the index passes ``eta_decay_start``; the
    user-item rate gamma never decays.
    """
    return hp.eta * hp.eta_decay ** max(0, epoch_index - hp.eta_decay_start)


def predict_single(
    params: ModelParams, user: int, item: int, factor_values: Sequence[int] = ()
) -> float:
    """Raw (unclamped, no-fallback) prediction p_u.q_i + sum_j p_ud_j.q_d_j."""
    if len(factor_values) != params.n_factors:
        raise ValueError(
            f"got {len(factor_values)} factor values, model has {params.n_factors} factors"
        )
    pred = float(np.dot(params.P[user], params.Q[item]))
    for j, v in enumerate(factor_values):
        pred += float(np.dot(params.user_factor(j)[user], params.value_factor(j)[v]))
    return pred


def predict_records(
    params: ModelParams,
    users: np.ndarray,
    items: np.ndarray,
    values: np.ndarray,
    seen_user: np.ndarray,
    seen_item: np.ndarray,
    seen_value: np.ndarray,
    global_mean: float,
    clamp: bool,
) -> np.ndarray:
    """Vector of predictions with cold-start fallbacks (see ``predict_pass``)."""
    out = np.empty(len(users))
    _kernels.predict_pass(
        params.P, params.Q, params.UF, params.VF,
        params.col_off, params.vf_base, params.fdims,
        np.ascontiguousarray(users, dtype=np.int32),
        np.ascontiguousarray(items, dtype=np.int32),
        np.ascontiguousarray(values, dtype=np.int32),
        seen_user, seen_item, seen_value,
        _sv_base(params.cardinalities),
        float(global_mean), clamp, RATING_MIN, RATING_MAX, out,
    )
    return out


def _sv_base(cardinalities: tuple[int, ...]) -> np.ndarray:
    return np.concatenate(([0], np.cumsum(np.asarray(cardinalities, dtype=np.int64)))).astype(
        np.int64
    )


def seen_masks(
    records: AugmentedRatings,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean masks of the users, items, and factor values observed in
    ``records`` (flat concatenated layout for the values)."""
    cards = records.schema.cardinalities
    seen_user = np.zeros(records.n_users, dtype=np.bool_)
    seen_user[records.users] = True
    seen_item = np.zeros(records.n_items, dtype=np.bool_)
    seen_item[records.items] = True
    sv_base = _sv_base(cards)
    seen_value = np.zeros(int(sv_base[-1]), dtype=np.bool_)
    for j in range(len(cards)):
        seen_value[sv_base[j] + records.values[:, j]] = True
    return seen_user, seen_item, seen_value


def sgd_epoch(
    params: ModelParams,
    records: AugmentedRatings,
    hp: HyperParameters,
    epoch_index: int = 1,
    order: np.ndarray | None = None,
) -> float:
    """One in-place SGD pass over ``records``; returns the pass's training RMSE.

    The training RMSE averages the squared pre-update residuals seen during
    the pass.  Raises :class:`DivergenceError` if any parameter is non-finite
    afterwards.
    """
    if params.n_factors != len(records.schema):
        raise ValueError(
            f"model has {params.n_factors} factor blocks, records carry {len(records.schema)}"
        )
    if order is None:
        order = np.arange(len(records), dtype=np.int64)
    sse = _kernels.sgd_pass(
        params.P, params.Q, params.UF, params.VF,
        params.col_off, params.vf_base, params.fdims,
        records.users, records.items, records.ratings, records.values,
        np.ascontiguousarray(order, dtype=np.int64),
        hp.lam, hp.gamma, effective_eta(hp, epoch_index),
    )
    if not params.all_finite():
        raise DivergenceError(epoch_index)
    return float(np.sqrt(sse / len(records)))


class TraceEntry(NamedTuple):
    epoch: int
    train_rmse: float
    val_rmse: float
    eta: float


def write_trace(trace: Sequence[TraceEntry], path) -> None:
    """Write a training trace as CSV with header ``epoch,train_rmse,val_rmse,eta``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_rmse,val_rmse,eta\n")
        for t in trace:
            fh.write(f"{t.epoch},{t.train_rmse:.10g},{t.val_rmse:.10g},{t.eta:.10g}\n")


def train(
    train_records: AugmentedRatings,
    val_records: AugmentedRatings,
    budget: DimensionBudget,
    hp: HyperParameters,
) -> tuple[ModelParams, list[TraceEntry]]:
    """Fit parameters by SGD with early stopping on validation RMSE.

    Keeps the best-validation snapshot and stops once the validation RMSE has
    gone ``max(patience, 1)`` consecutive epochs without strictly improving,
    or at ``max_epochs``.  Returns the best snapshot and the per-epoch trace
    ``(epoch, train RMSE, validation RMSE, effective eta)``.

    The monitored validation RMSE always uses raw (unclamped) predictions:
    near the small random init every raw prediction sits below the rating
    floor, so a clamped monitor would be exactly flat and trip the patience
    rule before any learning shows.  ``clamp_predictions`` only affects the
    fitted model's reported predictions.
    """
    if len(val_records) == 0:
        raise ValueError("validation records must be non-empty")
    cards = train_records.schema.cardinalities
    params = init_parameters(
        budget, train_records.n_users, train_records.n_items, cards, hp.init_sigma, hp.seed
    )
    su, si, sv = seen_masks(train_records)
    global_mean = float(train_records.ratings.mean())
    shuffle_rng = np.random.default_rng([hp.seed, 1])
    natural = np.arange(len(train_records), dtype=np.int64)

    best = params.copy()
    best_rmse = np.inf
    bad = 0
    trace: list[TraceEntry] = []
    for epoch in range(1, hp.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_records)) if hp.shuffle else natural
        train_rmse = sgd_epoch(params, train_records, hp, epoch, order)
        pred = predict_records(
            params, val_records.users, val_records.items, val_records.values,
            su, si, sv, global_mean, clamp=False,
        )
        val_rmse = float(np.sqrt(np.mean((pred - val_records.ratings) ** 2)))
        trace.append(TraceEntry(epoch, train_rmse, val_rmse, effective_eta(hp, epoch)))
        if val_rmse < best_rmse:
            best_rmse = val_rmse
            best = params.copy()
            bad = 0
        else:
            bad += 1
            if bad >= max(hp.patience, 1):
                break
    return best, trace


# ---------------------------------------------------------------------------
# full-batch objective and gradients (diagnostics; the training loop never
# calls these)


def objective(params: ModelParams, records: AugmentedRatings, lam: float) -> float:
    """Sum over records of half the squared residual plus (lam/2) times the
    squared norms of every block the record touches."""
    total = 0.0
    for k in range(len(records)):
        u, i = records.users[k], records.items[k]
        vals = records.values[k]
        pred = predict_single(params, u, i, vals)
        e = records.ratings[k] - pred
        reg = float(np.dot(params.P[u], params.P[u]) + np.dot(params.Q[i], params.Q[i]))
        for j, v in enumerate(vals):
            pu = params.user_factor(j)[u]
            qd = params.value_factor(j)[v]
            reg += float(np.dot(pu, pu) + np.dot(qd, qd))
        total += 0.5 * e * e + 0.5 * lam * reg
    return total


def gradients(params: ModelParams, records: AugmentedRatings, lam: float) -> ModelParams:
    """Analytic gradient of :func:`objective` for every parameter block."""
    g = ModelParams(
        budget=params.budget,
        cardinalities=params.cardinalities,
        P=np.zeros_like(params.P),
        Q=np.zeros_like(params.Q),
        UF=np.zeros_like(params.UF),
        VF=np.zeros_like(params.VF),
    )
    for k in range(len(records)):
        u, i = records.users[k], records.items[k]
        vals = records.values[k]
        e = records.ratings[k] - predict_single(params, u, i, vals)
        g.P[u] += -e * params.Q[i] + lam * params.P[u]
        g.Q[i] += -e * params.P[u] + lam * params.Q[i]
        for j, v in enumerate(vals):
            pu = params.user_factor(j)[u]
            qd = params.value_factor(j)[v]
            g.user_factor(j)[u] += -e * qd + lam * pu
            g.value_factor(j)[v] += -e * pu + lam * qd
    return g


# ---------------------------------------------------------------------------
# estimators


class _BaseMF(BaseEstimator):
    """Shared fit/predict machinery for the two factorization models."""

    def _budget(self, schema: FactorSchema) -> DimensionBudget:
        raise NotImplementedError

    def _as_records(self, X) -> AugmentedRatings:
        raise NotImplementedError

    def _hp(self) -> HyperParameters:
        p = self.get_params()
        return HyperParameters(
            f=p["f"], lam=p["lam"], gamma=p["gamma"],
            eta=p.get("eta", 0.01), eta_decay=p.get("eta_decay", 0.9),
            eta_decay_start=p.get("eta_decay_start", 5),
            max_epochs=p["max_epochs"], patience=p["patience"],
            init_sigma=p["init_sigma"], seed=p["seed"],
            clamp_predictions=p["clamp_predictions"], shuffle=p["shuffle"],
        )

    def fit(self, X, validation=None):
        """Fit on rating records, early-stopping on held-out RMSE.

        ``validation`` may be a records container to monitor; without one, a
        ``validation_fraction`` share of ``X`` is carved off (seed-determined)
        and excluded from the gradient updates.
        """
        records = self._as_records(X)
        if validation is not None:
            train_part = records
            val_part = self._as_records(validation)
        else:
            n = len(records)
            carve = max(1, int(round(self.validation_fraction * n)))
            if carve >= n:
                raise ValueError(f"cannot carve {carve} validation records out of {n}")
            rng = np.random.default_rng([self.seed, 7])
            perm = rng.permutation(n)
            val_part = records.subset(np.sort(perm[:carve]))
            train_part = records.subset(np.sort(perm[carve:]))
        budget = self._budget(train_part.schema)
        params, trace = train(train_part, val_part, budget, self._hp())
        self.params_ = params
        self.trace_ = trace
        self.budget_ = budget
        self.schema_ = train_part.schema
        seen_user, seen_item, seen_value = seen_masks(train_part)
        self.seen_user_ = seen_user
        self.seen_item_ = seen_item
        self.seen_value_ = seen_value
        self.global_mean_ = float(train_part.ratings.mean())
        self.n_epochs_ = len(trace)
        self.best_val_rmse_ = min(t.val_rmse for t in trace)
        return self

    def predict(self, X) -> np.ndarray:
        """Predicted ratings for the records in ``X`` (same factor layout)."""
        records = self._as_records(X)
        if len(records.schema) != self.params_.n_factors:
            raise ValueError(
                f"records carry {len(records.schema)} factor(s), "
                f"model was fit with {self.params_.n_factors}"
            )
        return predict_records(
            self.params_, records.users, records.items, records.values,
            self.seen_user_, self.seen_item_, self.seen_value_,
            self.global_mean_, self.clamp_predictions,
        )

    def predict_one(self, user: int, item: int, factor_values: Sequence[int] = ()) -> float:
        """Single prediction with the same fallback/clamp policy as predict."""
        values = np.asarray([factor_values], dtype=np.int32).reshape(1, -1)
        if values.shape[1] != self.params_.n_factors:
            raise ValueError(
                f"got {values.shape[1]} factor values, model has {self.params_.n_factors}"
            )
        return float(
            predict_records(
                self.params_, np.asarray([user]), np.asarray([item]), values,
                self.seen_user_, self.seen_item_, self.seen_value_,
                self.global_mean_, self.clamp_predictions,
            )[0]
        )


class RMF(_BaseMF):
    """Regularized matrix factorization: r̂ = p_u . q_i, trained by SGD.

    Accepts plain datasets or augmented records; any attached factors are
    ignored (the whole dimension budget goes to the user-item block).
    """

    def __init__(self, f=50, lam=0.01, gamma=0.01, max_epochs=120, patience=3,
                 init_sigma=0.02, seed=0, clamp_predictions=True, shuffle=True,
                 validation_fraction=0.05):
        self.f = f
        self.lam = lam
        self.gamma = gamma
        self.max_epochs = max_epochs
        self.patience = patience
        self.init_sigma = init_sigma
        self.seed = seed
        self.clamp_predictions = clamp_predictions
        self.shuffle = shuffle
        self.validation_fraction = validation_fraction

    def _as_records(self, X) -> AugmentedRatings:
        if isinstance(X, Dataset):
            return AugmentedRatings.plain(X)
        if isinstance(X, AugmentedRatings):
            if len(X.schema):
                # drop the factor columns; this model has no interaction terms
                return AugmentedRatings(
                    name=X.name, users=X.users, items=X.items, ratings=X.ratings,
                    timestamps=X.timestamps,
                    values=np.empty((len(X), 0), dtype=np.int32),
                    schema=FactorSchema(factors=()),
                    n_users=X.n_users, n_items=X.n_items,
                )
            return X
        raise TypeError(f"expected Dataset or AugmentedRatings, got {type(X).__name__}")

    def _budget(self, schema: FactorSchema) -> DimensionBudget:
        return DimensionBudget(f_item=self.f, f_factor=())


class MLIMF(_BaseMF):
    """Multi-linear interactive matrix factorization.

    Extends :class:`RMF` predictions with one interaction term per decision
    factor: r̂ = p_u . q_i + sum_j p_ud_j . q_d_j, where d_j is the record's
    value of factor j.  The total dimension ``f`` is split across blocks by
    the ``application`` rule, or by an explicit ``budget`` (f_item, f_factor)
    pair.  With a factor-free input it degenerates to plain RMF exactly.
    """

    def __init__(self, f=50, lam=0.01, gamma=0.01, eta=0.01, eta_decay=0.9,
                 eta_decay_start=5, max_epochs=120, patience=3, init_sigma=0.02,
                 seed=0, clamp_predictions=True, shuffle=True,
                 validation_fraction=0.05, application="auto", budget=None):
        self.f = f
        self.lam = lam
        self.gamma = gamma
        self.eta = eta
        self.eta_decay = eta_decay
        self.eta_decay_start = eta_decay_start
        self.max_epochs = max_epochs
        self.patience = patience
        self.init_sigma = init_sigma
        self.seed = seed
        self.clamp_predictions = clamp_predictions
        self.shuffle = shuffle
        self.validation_fraction = validation_fraction
        self.application = application
        self.budget = budget

    def _as_records(self, X) -> AugmentedRatings:
        if isinstance(X, AugmentedRatings):
            return X
        if isinstance(X, Dataset):
            return AugmentedRatings.plain(X)
        raise TypeError(f"expected AugmentedRatings, got {type(X).__name__}")

    def _budget(self, schema: FactorSchema) -> DimensionBudget:
        if self.budget is not None:
            f_item, f_factor = self.budget
            b = DimensionBudget(f_item=int(f_item), f_factor=tuple(int(d) for d in f_factor))
            if b.total != self.f:
                raise ValueError(f"budget sums to {b.total}, f is {self.f}")
            if len(b.f_factor) != len(schema):
                raise ValueError(
                    f"budget has {len(b.f_factor)} factor dims, records carry {len(schema)}"
                )
            return b
        if self.application in APPLICATIONS:
            b = split_dimensions(self.f, self.application)
        elif self.application == "auto":
            if len(schema) == 0:
                return DimensionBudget(f_item=self.f, f_factor=())
            if len(schema) == 1:
                b = split_dimensions(self.f, "temporal")
            elif len(schema) == 3:
                b = split_dimensions(self.f, "extracted-features")
            else:
                raise ValueError(
                    f"cannot infer a dimension split for {len(schema)} factors; "
                    "pass application= or budget="
                )
        else:
            raise ValueError(
                f"application must be 'auto' or one of {APPLICATIONS}, got {self.application!r}"
            )
        if len(b.f_factor) != len(schema):
            raise ValueError(
                f"application {self.application!r} expects {len(b.f_factor)} factor(s), "
                f"records carry {len(schema)}"
            )
        return b


# ---------------------------------------------------------------------------
# model artifacts


def save_model(model: _BaseMF, path) -> None:
    """Serialize a fitted model (settings + every parameter block) to ``.npz``."""
    meta = {
        "class": type(model).__name__,
        "params": model.get_params(),
        "f_item": model.budget_.f_item,
        "f_factor": list(model.budget_.f_factor),
        "cardinalities": list(model.params_.cardinalities),
        "global_mean": model.global_mean_,
        "n_epochs": model.n_epochs_,
        "best_val_rmse": model.best_val_rmse_,
        "schema": model.schema_.to_json(),
    }
    np.savez(
        path,
        meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
        P=model.params_.P, Q=model.params_.Q, UF=model.params_.UF, VF=model.params_.VF,
        seen_user=model.seen_user_, seen_item=model.seen_item_, seen_value=model.seen_value_,
        trace=np.asarray(model.trace_, dtype=np.float64),
    )


def load_model(path) -> _BaseMF:
    """Rebuild a fitted model saved by :func:`save_model`; round-trips exactly."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        cls = {"RMF": RMF, "MLIMF": MLIMF}[meta["class"]]
        model = cls(**meta["params"])
        budget = DimensionBudget(
            f_item=int(meta["f_item"]), f_factor=tuple(int(d) for d in meta["f_factor"])
        )
        model.params_ = ModelParams(
            budget=budget,
            cardinalities=tuple(int(c) for c in meta["cardinalities"]),
            P=z["P"], Q=z["Q"], UF=z["UF"], VF=z["VF"],
        )
        model.budget_ = budget
        model.schema_ = FactorSchema.from_json(meta["schema"])
        model.seen_user_ = z["seen_user"]
        model.seen_item_ = z["seen_item"]
        model.seen_value_ = z["seen_value"]
        model.global_mean_ = float(meta["global_mean"])
        model.n_epochs_ = int(meta["n_epochs"])
        model.best_val_rmse_ = float(meta["best_val_rmse"])
        model.trace_ = [
            TraceEntry(int(e), float(tr), float(vr), float(et)) for e, tr, vr, et in z["trace"]
        ]
    return model
