"""Pattern classification over trials: ANOVA feature ranking, a primal
linear SVM, rank-based AUC, cross-validation drivers, and factor-weight
connectivity features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def anova_f_select(features, labels, n_select: int = 500) -> np.ndarray:
    """Indices of the `n_select` columns with the largest one-way F statistic.

    Columns that are constant within every class but differ between
    classes get an infinite F and rank first; fully constant columns get
    F = 0 and rank last.  Ties break toward the lower column index.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    if np.any(counts < 2):
        raise ValueError("every class needs at least two rows")
    n, m = x.shape
    grand = x.mean(axis=0)
    ssb = np.zeros(m)
    ssw = np.zeros(m)
    within_const = np.ones(m, dtype=bool)
    for c in classes:
        xc = x[y == c]
        mc = xc.mean(axis=0)
        ssb += xc.shape[0] * (mc - grand) ** 2
        ssw += ((xc - mc) ** 2).sum(axis=0)
        within_const &= np.ptp(xc, axis=0) == 0
    col_const = np.ptp(x, axis=0) == 0

    dfb = classes.size - 1
    dfw = n - classes.size
    with np.errstate(divide="ignore", invalid="ignore"):
        f = (ssb / dfb) / (ssw / max(dfw, 1))
    f = np.where(col_const, 0.0, f)
    f = np.where(~col_const & within_const, np.inf, f)
    f = np.where(np.isnan(f), 0.0, f)

    order = sorted(range(m), key=lambda j: (-f[j], j))
    return np.asarray(order[: min(n_select, m)], dtype=np.intp)


def linear_svm_train(x, y, c: float = 1.0, epochs: int = 10_000):
    """Soft-margin linear classifier by deterministic subgradient descent.

    Minimizes 0.5 |w|^2 + c * mean_i hinge(1 - y_i (w.x_i + b)) with the
    1/(lambda t) step schedule (lambda = 1/c) over a fixed number of
    full-batch epochs.  The mean-scaled hinge keeps the solution
    invariant under dataset duplication.  Returns (w, b).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if set(np.unique(y)) - {-1.0, 1.0}:
        raise ValueError("labels must be -1/+1")
    if np.unique(y).size < 2:
        raise ValueError("both classes must be present")
    n, d = x.shape
    lam = 1.0 / c
    w = np.zeros(d)
    b = 0.0
    for t in range(1, epochs + 1):
        margins = y * (x @ w + b)
        viol = margins < 1.0
        gw = lam * w
        if np.any(viol):
            gw = gw - (y[viol] @ x[viol]) / n
        gb = -float(y[viol].sum()) / n
        eta = 1.0 / (lam * t)
        w = w - eta * gw
        b = b - eta * gb
    return w, b


def svm_scores(x, w, b) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) @ w + b


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic, with average
    ranks on tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# cross-validation


def loro_folds(run_ids):
    """Leave-one-run-out: one fold per distinct run id."""
    run_ids = np.asarray(run_ids)
    runs = sorted(set(run_ids.tolist()))
    if len(runs) < 2:
        raise ValueError("leave-one-run-out needs at least two runs")
    folds = []
    for r in runs:
        test = np.flatnonzero(run_ids == r)
        train = np.flatnonzero(run_ids != r)
        folds.append((train, test))
    return folds


def stratified_folds(labels, n_folds: int = 3, seed: int = 0):
    """Per-class round-robin assignment after a seeded shuffle."""
    labels = np.asarray(labels)
    if labels.size < n_folds:
        raise ValueError("fewer rows than folds")
    rng = np.random.default_rng(seed)
    assignment = np.empty(labels.size, dtype=np.intp)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        assignment[idx] = np.arange(idx.size) % n_folds
    folds = []
    for f in range(n_folds):
        test = np.flatnonzero(assignment == f)
        train = np.flatnonzero(assignment != f)
        folds.append((train, test))
    return folds


@dataclass
class ClassScores:
    mean: float
    std: float
    folds: list[float]


def mvpa_run(
    features,
    labels,
    scheme: str = "stratified",
    run_ids=None,
    n_select: int | None = None,
    c: float = 1.0,
    seed: int = 0,
    svm_epochs: int = 10_000,
) -> dict:
    """One-vs-rest classification AUC per class across cross-validation folds.

    `scheme` is "loro" (requires run ids) or "stratified" (three folds).
    When `n_select` is set, ANOVA feature ranking runs inside each
    training fold on the fold's binary one-vs-rest labels; otherwise all
    columns are used (the mode for model-derived weight features).
    Folds whose training or test side lacks one of the binary classes
    are skipped.  Returns {class: ClassScores}.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if scheme == "loro":
        if run_ids is None:
            raise ValueError("leave-one-run-out needs run ids")
        folds = loro_folds(run_ids)
    elif scheme == "stratified":
        folds = stratified_folds(y, 3, seed)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    results = {}
    for cls in np.unique(y).tolist():
        binary = np.where(y == cls, 1.0, -1.0)
        fold_aucs = []
        for train, test in folds:
            if np.unique(binary[train]).size < 2 or np.unique(binary[test]).size < 2:
                continue
            cols = np.arange(x.shape[1])
            if n_select is not None:
                cols = anova_f_select(x[train], binary[train], n_select)
            w, b = linear_svm_train(
                x[np.ix_(train, cols)], binary[train], c, svm_epochs
            )
            scores = svm_scores(x[np.ix_(test, cols)], w, b)
            fold_aucs.append(auc(scores, binary[test] > 0))
        if not fold_aucs:
            raise ValueError(f"no usable folds for class {cls!r}")
        arr = np.asarray(fold_aucs)
        results[cls] = ClassScores(float(arr.mean()), float(arr.std()), fold_aucs)
    return results


# ---------------------------------------------------------------------------
# functional connectivity


def fc_matrix(weights) -> np.ndarray:
    """Pearson correlation between factor weight time courses.

    Constant columns correlate 0 with everything (including themselves);
    other diagonal entries are exactly 1.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 2:
        raise ValueError("need a (T, K) matrix with T >= 2")
    k = w.shape[1]
    constant = np.ptp(w, axis=0) == 0
    centered = w - w.mean(axis=0)
    std = w.std(axis=0)
    safe = np.where(constant, 1.0, std)
    normed = centered / safe
    corr = (normed.T @ normed) / w.shape[0]
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    idx = np.arange(k)
    corr[idx, idx] = np.where(constant, 0.0, 1.0)
    return corr


def fc_features(fc_matrices) -> np.ndarray:
    """Vectorized strict upper triangles, one row per trial."""
    mats = [np.asarray(m, dtype=np.float64) for m in fc_matrices]
    k = mats[0].shape[0]
    iu = np.triu_indices(k, 1)
    return np.stack([m[iu] for m in mats])


def fc_classify(
    fc_matrices,
    labels,
    scheme: str = "stratified",
    run_ids=None,
    c: float = 1.0,
    seed: int = 0,
    svm_epochs: int = 10_000,
) -> dict:
    """Classify trials from their connectivity patterns (upper-triangle
    correlations), reusing the cross-validation machinery."""
    return mvpa_run(
        fc_features(fc_matrices),
        labels,
        scheme=scheme,
        run_ids=run_ids,
        n_select=None,
        c=c,
        seed=seed,
        svm_epochs=svm_epochs,
    )


def timeavg_weight_features(w_means, indices=None) -> np.ndarray:
    """Stack per-trial time-averaged weight vectors into a feature matrix.

    `w_means` holds one (T, K) array (or tensor) per trial.
    """
    if indices is None:
        indices = range(len(w_means))
    rows = []
    for n in indices:
        w = w_means[n]
        arr = np.asarray(w.data if hasattr(w, "data") else w, dtype=np.float64)
        rows.append(arr.mean(axis=0))
    return np.stack(rows)
