"""Independent oracles used across the test suite.

Everything here is deliberately written as plain scalar loops or brute
force so it shares no code path with the implementations under test.
"""

from __future__ import annotations

import math

import numpy as np

from mopred.tensor import GradientTape, Tensor


def finite_difference_grad(scalar_fn, arrays: list[np.ndarray], h: float = 1e-5):
    """Central-difference gradients of scalar_fn(*arrays) w.r.t. each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar_fn(*arrays)
            flat[i] = orig - h
            fm = scalar_fn(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, fd: np.ndarray, floor: float = 1e-2) -> float:
    """Max relative error with an absolute floor for near-zero gradients."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return float((np.abs(analytic - fd) / denom).max())


def gradcheck(fn, arrays: list[np.ndarray], tol: float = 1e-4, h: float = 1e-5) -> float:
    """Compare tape gradients of fn(list of Tensors) -> scalar Tensor against
    central finite differences.  Returns the worst relative error."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        loss = fn(*tensors)
    tape.backward(loss)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]

    def scalar(*arrs):
        return fn(*[Tensor(a) for a in arrs]).item()

    fd = finite_difference_grad(scalar, [a.copy() for a in arrays], h=h)
    worst = max(relative_error(a, f) for a, f in zip(analytic, fd))
    assert worst < tol, f"gradient mismatch: {worst:.3e} >= {tol}"
    return worst


def random_projection_loss(out, rng: np.random.Generator):
    """Project a tensor output to a scalar with fixed random weights."""
    from mopred import tensor as T

    w = rng.standard_normal(out.shape)
    return T.tensor_sum(T.mul(out, Tensor(w)))


# ---------------------------------------------------------------------------
# metric oracles (scalar loops)


def oracle_min_ade(trajectories, gt, gt_valid):
    best = math.inf
    for k in range(len(trajectories)):
        total, count = 0.0, 0
        for t in range(len(gt)):
            if gt_valid[t] <= 0:
                continue
            dx = trajectories[k][t][0] - gt[t][0]
            dy = trajectories[k][t][1] - gt[t][1]
            total += math.sqrt(dx * dx + dy * dy)
            count += 1
        best = min(best, total / count)
    return best


def oracle_min_fde(trajectories, gt, gt_valid):
    last = max(t for t in range(len(gt)) if gt_valid[t] > 0)
    best = math.inf
    for k in range(len(trajectories)):
        dx = trajectories[k][last][0] - gt[last][0]
        dy = trajectories[k][last][1] - gt[last][1]
        best = min(best, math.sqrt(dx * dx + dy * dy))
    return best


def oracle_brier_min_fde(trajectories, confidences, gt, gt_valid):
    last = max(t for t in range(len(gt)) if gt_valid[t] > 0)
    errors = []
    for k in range(len(trajectories)):
        dx = trajectories[k][last][0] - gt[last][0]
        dy = trajectories[k][last][1] - gt[last][1]
        errors.append(math.sqrt(dx * dx + dy * dy))
    best = 0
    for k in range(len(errors)):
        if errors[k] < errors[best]:
            best = k
    return errors[best] + (1.0 - confidences[best]) ** 2


def oracle_map(records, threshold, soft):
    """records: list of (trajectories, confidences, gt, gt_valid, target_type).

    Enumerates the pooled PR curve pointwise per type bucket and averages
    11-point interpolated AP over non-empty buckets.
    """
    buckets = sorted({r[4] for r in records})
    aps = []
    for bucket in buckets:
        group = [r for r in records if r[4] == bucket]
        entries = []
        for trajectories, confidences, gt, gt_valid, _ in group:
            last = max(t for t in range(len(gt)) if gt_valid[t] > 0)
            errors = []
            for k in range(len(trajectories)):
                dx = trajectories[k][last][0] - gt[last][0]
                dy = trajectories[k][last][1] - gt[last][1]
                errors.append(math.sqrt(dx * dx + dy * dy))
            order = sorted(range(len(confidences)), key=lambda k: (-confidences[k], k))
            got_tp = False
            for k in order:
                if errors[k] <= threshold:
                    if not got_tp:
                        entries.append((confidences[k], "tp"))
                        got_tp = True
                    elif not soft:
                        entries.append((confidences[k], "fp"))
                else:
                    entries.append((confidences[k], "fp"))
        levels = sorted({c for c, _ in entries}, reverse=True)
        points = []
        tp = fp = 0
        for level in levels:
            for c, kind in entries:
                if c == level:
                    if kind == "tp":
                        tp += 1
                    else:
                        fp += 1
            recall = tp / len(group)
            precision = tp / (tp + fp) if (tp + fp) else 0.0
            points.append((recall, precision))
        ap = 0.0
        for i in range(11):
            r = i / 10.0
            best = 0.0
            for rec, prec in points:
                if rec >= r - 1e-12 and prec > best:
                    best = prec
            ap += best
        aps.append(ap / 11.0)
    return sum(aps) / len(aps)


def oracle_knn(query_pos, key_pos, k):
    """Brute-force KNN with full sort on (distance, index)."""
    out = []
    for q in query_pos:
        scored = []
        for j, p in enumerate(key_pos):
            d = math.sqrt((q[0] - p[0]) ** 2 + (q[1] - p[1]) ** 2)
            scored.append((d, j))
        scored.sort()
        out.append([j for _, j in scored[:k]])
    return np.asarray(out)


def oracle_assign_distinct(endpoints, confidences, gt_endpoint, radius):
    """Brute-force duplicate suppression + nearest-endpoint selection."""
    order = sorted(range(len(confidences)), key=lambda i: (-confidences[i], i))
    kept = []
    for i in order:
        dup = False
        for j in kept:
            d = math.dist(tuple(endpoints[i]), tuple(endpoints[j]))
            if d < radius:
                dup = True
                break
        if not dup:
            kept.append(i)
    best = kept[0]
    best_d = math.dist(tuple(endpoints[best]), tuple(gt_endpoint))
    for i in kept[1:]:
        d = math.dist(tuple(endpoints[i]), tuple(gt_endpoint))
        if d < best_d:
            best, best_d = i, d
    return best


def oracle_select_final(endpoints, confidences, top_k, radius):
    """Brute-force greedy NMS + backfill; returns selected indices."""
    order = sorted(range(len(confidences)), key=lambda i: (-confidences[i], i))
    selected = []
    for i in order:
        if len(selected) == top_k:
            break
        if any(math.dist(tuple(endpoints[i]), tuple(endpoints[j])) < radius for j in selected):
            continue
        selected.append(i)
    for i in order:
        if len(selected) == top_k:
            break
        if i not in selected:
            selected.append(i)
    return selected


def linear_interpolation_baseline(positions, velocities, valid):
    """Fill masked steps of a (T, 2)+(T, 2) history by linear interpolation
    between the nearest valid steps (linear extrapolation at the edges,
    constant when only one valid step exists)."""
    t_p = len(positions)
    known = [t for t in range(t_p) if valid[t] > 0]
    channels = np.concatenate([positions, velocities], axis=1)
    out = channels.copy()
    for t in range(t_p):
        if valid[t] > 0:
            continue
        before = [k for k in known if k < t]
        after = [k for k in known if k > t]
        if before and after:
            a, b = before[-1], after[0]
            w = (t - a) / (b - a)
            out[t] = (1 - w) * channels[a] + w * channels[b]
        elif len(after) >= 2:
            a, b = after[0], after[1]
            slope = (channels[b] - channels[a]) / (b - a)
            out[t] = channels[a] + slope * (t - a)
        elif len(before) >= 2:
            a, b = before[-2], before[-1]
            slope = (channels[b] - channels[a]) / (b - a)
            out[t] = channels[b] + slope * (t - b)
        elif after:
            out[t] = channels[after[0]]
        elif before:
            out[t] = channels[before[-1]]
    return out[:, :2], out[:, 2:]
