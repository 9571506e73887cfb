# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled pruning kernels; scalar twin of _pruning_py (same call convention)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def pattern_expectations(cnp.int32_t[:] parent, cnp.int32_t[:] child1, cnp.int32_t[:] child2,
                         cnp.int32_t[:] order, int root,
                         double[:] surv, double[:] efflen, double[:] xi,
                         cnp.int8_t[:, :] patterns, double mu):
    cdef Py_ssize_t P = patterns.shape[0]
    cdef Py_ssize_t n_leaves = patterns.shape[1]
    cdef Py_ssize_t size = parent.shape[0]
    cdef Py_ssize_t n_nodes = order.shape[0]

    cdef cnp.ndarray[double, ndim=1] z_arr = np.zeros(P)
    cdef double[:] z = z_arr
    cdef cnp.ndarray[double, ndim=1] u_arr = np.zeros(size)
    cdef cnp.ndarray[double, ndim=1] d_arr = np.zeros(size)
    cdef cnp.ndarray[double, ndim=1] out_arr = np.zeros(size)
    cdef double[:] u = u_arr
    cdef double[:] d = d_arr
    cdef double[:] out = out_arr

    cdef Py_ssize_t p, k, kk
    cdef int node, c1, c2, c
    cdef double xi_i, f1, f2, acc
    cdef cnp.int8_t code

    with nogil:
        for p in range(P):
            for k in range(n_nodes):
                node = order[k]
                if node <= n_leaves:
                    code = patterns[p, node - 1]
                    xi_i = xi[node]
                    if code == 1:
                        u[node] = xi_i
                        d[node] = 0.0
                    elif code == 0:
                        u[node] = 0.0
                        d[node] = xi_i
                    else:
                        u[node] = 1.0 - xi_i
                        d[node] = 1.0 - xi_i
                else:
                    c1 = child1[node]
                    c2 = child2[node]
                    f1 = surv[c1] * u[c1] + (1.0 - surv[c1]) * d[c1]
                    f2 = surv[c2] * u[c2] + (1.0 - surv[c2]) * d[c2]
                    u[node] = f1 * f2
                    d[node] = d[c1] * d[c2]
            out[root] = 1.0
            acc = u[root] / mu
            for kk in range(n_nodes):
                node = order[n_nodes - 1 - kk]
                if node <= n_leaves:
                    continue
                c1 = child1[node]
                c2 = child2[node]
                out[c1] = out[node] * d[c2]
                out[c2] = out[node] * d[c1]
                acc += out[c1] * ((u[c1] - d[c1]) * (1.0 - surv[c1]) / mu + d[c1] * efflen[c1])
                acc += out[c2] * ((u[c2] - d[c2]) * (1.0 - surv[c2]) / mu + d[c2] * efflen[c2])
            z[p] = acc
    return z_arr


def observable_total(cnp.int32_t[:] parent, cnp.int32_t[:] child1, cnp.int32_t[:] child2,
                     cnp.int32_t[:] order, int root,
                     double[:] surv, double[:] efflen, double[:] xi,
                     int n_leaves, double mu):
    cdef Py_ssize_t size = parent.shape[0]
    cdef Py_ssize_t n_nodes = order.shape[0]
    cdef cnp.ndarray[double, ndim=1] v_arr = np.zeros(size)
    cdef double[:] v = v_arr
    cdef Py_ssize_t k
    cdef int node, c1, c2
    cdef double total

    with nogil:
        for k in range(n_nodes):
            node = order[k]
            if node <= n_leaves:
                v[node] = 1.0 - xi[node]
            else:
                c1 = child1[node]
                c2 = child2[node]
                v[node] = (surv[c1] * v[c1] + 1.0 - surv[c1]) * (surv[c2] * v[c2] + 1.0 - surv[c2])
        total = (1.0 - v[root]) / mu
        for k in range(n_nodes):
            node = order[k]
            if node != root:
                total += (1.0 - v[node]) * (1.0 - surv[node]) / mu
    return total
