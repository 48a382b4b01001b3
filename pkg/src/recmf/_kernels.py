"""Numba kernels: SGD training passes, batch prediction, and the co-rating
accumulators behind the neighborhood models.

Parameter layout shared by the factorization kernels:

* ``P`` (|U| x f_i) and ``Q`` (|I| x f_i) — user-item blocks;
* ``UF`` (|U| x sum f_Dj) — per-user factor blocks, factor ``j`` occupying
  columns ``[col_off[j], col_off[j+1])``;
* ``VF`` — all value vectors flattened, factor ``j``'s table starting at
  ``vf_base[j]`` with ``fdims[j]`` entries per value.

All kernels release the GIL so folds/seeds can run on threads.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def sgd_pass(P, Q, UF, VF, col_off, vf_base, fdims,
             users, items, ratings, values, order,
             lam, gamma, eta):
    """One pass of per-sample SGD in the given visit order.

    For each sample: the raw prediction p_u.q_i + sum_j p_ud_j.q_d_j, the
    residual e = r - prediction, then the paired updates

        p_u    += gamma * (e*q_i    - lam*p_u)
        q_i    += gamma * (e*p_u    - lam*q_i)
        p_ud_j += eta   * (e*q_d_j  - lam*p_ud_j)
        q_d_j  += eta   * (e*p_ud_j - lam*q_d_j)

    with each pair evaluated at its pre-update values.  Returns the sum of
    squared pre-update residuals.
    """
    f_i = P.shape[1]
    nf = fdims.shape[0]
    sse = 0.0
    for idx in range(order.shape[0]):
        k = order[idx]
        u = users[k]
        i = items[k]
        pred = 0.0
        for a in range(f_i):
            pred += P[u, a] * Q[i, a]
        for j in range(nf):
            base = vf_base[j] + values[k, j] * fdims[j]
            co = col_off[j]
            for a in range(fdims[j]):
                pred += UF[u, co + a] * VF[base + a]
        e = ratings[k] - pred
        sse += e * e
        for a in range(f_i):
            pu = P[u, a]
            qi = Q[i, a]
            P[u, a] = pu + gamma * (e * qi - lam * pu)
            Q[i, a] = qi + gamma * (e * pu - lam * qi)
        for j in range(nf):
            base = vf_base[j] + values[k, j] * fdims[j]
            co = col_off[j]
            for a in range(fdims[j]):
                pud = UF[u, co + a]
                qd = VF[base + a]
                UF[u, co + a] = pud + eta * (e * qd - lam * pud)
                VF[base + a] = qd + eta * (e * pud - lam * qd)
    return sse


@njit(cache=True, nogil=True)
def predict_pass(P, Q, UF, VF, col_off, vf_base, fdims,
                 users, items, values,
                 seen_user, seen_item, seen_value, sv_base,
                 global_mean, clamp, lo, hi, out):
    """Batch prediction with cold-start fallbacks.

    A user never seen in training predicts the global training mean.  A known
    user simply omits the terms of an unseen item or unseen factor value.
    When ``clamp`` is set the result is clipped to [lo, hi].
    """
    f_i = P.shape[1]
    nf = fdims.shape[0]
    n_users = P.shape[0]
    n_items = Q.shape[0]
    for k in range(users.shape[0]):
        u = users[k]
        if u < 0 or u >= n_users or not seen_user[u]:
            pred = global_mean
        else:
            pred = 0.0
            i = items[k]
            if 0 <= i < n_items and seen_item[i]:
                for a in range(f_i):
                    pred += P[u, a] * Q[i, a]
            for j in range(nf):
                v = values[k, j]
                if 0 <= v < sv_base[j + 1] - sv_base[j] and seen_value[sv_base[j] + v]:
                    base = vf_base[j] + v * fdims[j]
                    co = col_off[j]
                    for a in range(fdims[j]):
                        pred += UF[u, co + a] * VF[base + a]
        if clamp:
            if pred < lo:
                pred = lo
            elif pred > hi:
                pred = hi
        out[k] = pred
    return out


@njit(cache=True, nogil=True)
def corating_sums(indptr, indices, data, other_indptr, other_indices, other_data, e):
    """Co-rating accumulators between entity ``e`` and every other entity.

    Entities are the rows of a CSR matrix (users over items, or items over
    users); ``other_*`` is the CSC-style transpose used to find co-raters.
    Returns, per other entity v: the dot product over common coordinates, the
    two restricted squared norms, and the sum of squared products — enough
    for both cosine variants — plus the co-rating counts.
    """
    n = indptr.shape[0] - 1
    dot = np.zeros(n)
    sq_self = np.zeros(n)
    sq_other = np.zeros(n)
    sqprod = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    for p in range(indptr[e], indptr[e + 1]):
        c = indices[p]
        x = data[p]
        for q in range(other_indptr[c], other_indptr[c + 1]):
            v = other_indices[q]
            if v == e:
                continue
            y = other_data[q]
            dot[v] += x * y
            sq_self[v] += x * x
            sq_other[v] += y * y
            sqprod[v] += x * x * y * y
            counts[v] += 1
    return dot, sq_self, sq_other, sqprod, counts


@njit(cache=True, nogil=True)
def neighbor_predict(target_entities, companion_entities,
                     nbr_indptr, nbr_indices, nbr_sims,
                     comp_indptr, comp_indices, comp_ratings,
                     target_means, fallback_means, global_mean,
                     lo, hi, out):
    """Mean-centered weighted neighborhood prediction.

    For each query k with target entity t (user or item) and companion c (the
    other axis): average over t's retained neighbors v that rated/were rated
    by c of (r_vc - mean_v), weighted by sim(t, v), added to mean_t.  Queries
    with an unknown target fall back to the companion-side mean, then to the
    global mean.  Neighbor lists and companion rating rows are sorted by id
    for the merge walk.  Results clip to [lo, hi].
    """
    for k in range(target_entities.shape[0]):
        t = target_entities[k]
        c = companion_entities[k]
        n_t = nbr_indptr.shape[0] - 1
        n_c = comp_indptr.shape[0] - 1
        if t < 0 or t >= n_t or target_means[t] != target_means[t]:
            # unknown target: companion mean, else global
            if 0 <= c < n_c and fallback_means[c] == fallback_means[c]:
                pred = fallback_means[c]
            else:
                pred = global_mean
        else:
            num = 0.0
            den = 0.0
            if 0 <= c < n_c:
                a = nbr_indptr[t]
                a_end = nbr_indptr[t + 1]
                b = comp_indptr[c]
                b_end = comp_indptr[c + 1]
                while a < a_end and b < b_end:
                    va = nbr_indices[a]
                    vb = comp_indices[b]
                    if va == vb:
                        s = nbr_sims[a]
                        num += s * (comp_ratings[b] - target_means[va])
                        den += s
                        a += 1
                        b += 1
                    elif va < vb:
                        a += 1
                    else:
                        b += 1
            if den > 0.0:
                pred = target_means[t] + num / den
            else:
                pred = target_means[t]
        if pred < lo:
            pred = lo
        elif pred > hi:
            pred = hi
        out[k] = pred
    return out
