# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_pykernels`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, pow
from libc.stdlib cimport malloc, free

cnp.import_array()

METRIC_COSINE = 0
METRIC_EUCLIDEAN = 1


def adam_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long step):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double c1 = 1.0 - pow(beta1, <double>step)
    cdef double c2 = 1.0 - pow(beta2, <double>step)
    cdef double gi
    for i in range(n):
        gi = g[i]
        m[i] = m[i] * beta1 + (1.0 - beta1) * gi
        v[i] = v[i] * beta2 + (1.0 - beta2) * (gi * gi)
        p[i] = p[i] - lr * (m[i] / c1) / (sqrt(v[i] / c2) + eps)


def class_sums(const double[:, ::1] emb, const long[::1] labels, long n_classes):
    cdef Py_ssize_t n = emb.shape[0], d = emb.shape[1], i, j
    cdef long c
    sums_arr = np.zeros((n_classes, d), dtype=np.float64)
    counts_arr = np.zeros(n_classes, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef long[::1] counts = counts_arr
    for i in range(n):
        c = labels[i]
        if c < 0 or c >= n_classes:
            raise IndexError(f"label {c} out of range")
        counts[c] += 1
        for j in range(d):
            sums[c, j] += emb[i, j]
    return sums_arr, counts_arr


cdef inline bint _before(double da, Py_ssize_t ia, double db, Py_ssize_t ib) nogil:
    return da < db or (da == db and ia < ib)


def knn_predict(const double[:, ::1] bank, const long[::1] labels,
                const double[:, ::1] queries, long k, int metric):
    cdef Py_ssize_t n_bank = bank.shape[0], d = bank.shape[1], n_q = queries.shape[0]
    cdef Py_ssize_t q, j, t, pos, a, b
    cdef double acc, diff, qn, dist
    cdef double* bnorm = <double*>malloc(n_bank * sizeof(double))
    cdef double* best_d = <double*>malloc(k * sizeof(double))
    cdef Py_ssize_t* best_i = <Py_ssize_t*>malloc(k * sizeof(Py_ssize_t))
    cdef long* vote_lab = <long*>malloc(k * sizeof(long))
    cdef long* vote_cnt = <long*>malloc(k * sizeof(long))
    cdef double* vote_sum = <double*>malloc(k * sizeof(double))
    cdef long n_votes, lab, win
    cdef Py_ssize_t filled
    out_arr = np.empty(n_q, dtype=np.int64)
    cdef long[::1] out = out_arr
    try:
        if metric == METRIC_COSINE:
            for j in range(n_bank):
                acc = 0.0
                for t in range(d):
                    acc += bank[j, t] * bank[j, t]
                bnorm[j] = sqrt(acc)
        for q in range(n_q):
            if metric == METRIC_COSINE:
                acc = 0.0
                for t in range(d):
                    acc += queries[q, t] * queries[q, t]
                qn = sqrt(acc)
            filled = 0
            for j in range(n_bank):
                acc = 0.0
                if metric == METRIC_COSINE:
                    for t in range(d):
                        acc += (queries[q, t] / qn) * (bank[j, t] / bnorm[j])
                    dist = 1.0 - acc
                else:
                    for t in range(d):
                        diff = queries[q, t] - bank[j, t]
                        acc += diff * diff
                    dist = sqrt(acc)
                # insertion into the sorted k-buffer keyed on (dist, index)
                if filled < k:
                    pos = filled
                    filled += 1
                elif _before(dist, j, best_d[k - 1], best_i[k - 1]):
                    pos = k - 1
                else:
                    continue
                while pos > 0 and _before(dist, j, best_d[pos - 1], best_i[pos - 1]):
                    best_d[pos] = best_d[pos - 1]
                    best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = dist
                best_i[pos] = j
            n_votes = 0
            for t in range(filled):
                lab = labels[best_i[t]]
                for a in range(n_votes):
                    if vote_lab[a] == lab:
                        vote_cnt[a] += 1
                        vote_sum[a] += best_d[t]
                        break
                else:
                    vote_lab[n_votes] = lab
                    vote_cnt[n_votes] = 1
                    vote_sum[n_votes] = best_d[t]
                    n_votes += 1
            win = 0
            for a in range(1, n_votes):
                if (vote_cnt[a] > vote_cnt[win]
                        or (vote_cnt[a] == vote_cnt[win]
                            and (vote_sum[a] < vote_sum[win]
                                 or (vote_sum[a] == vote_sum[win] and vote_lab[a] < vote_lab[win])))):
                    win = a
            out[q] = vote_lab[win]
    finally:
        free(bnorm)
        free(best_d)
        free(best_i)
        free(vote_lab)
        free(vote_cnt)
        free(vote_sum)
    return out_arr
