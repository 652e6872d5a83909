# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled network simplex for the dense transportation problem.

Line-for-line port of ``_simplex_py.network_simplex``; see that module for
the algorithm notes.
"""

import numpy as np

from libc.math cimport sqrt, INFINITY

cdef enum:
    STATE_TREE = 0
    STATE_LOWER = 1
    DIR_UP = 1
    DIR_DOWN = -1


cdef inline Py_ssize_t _src(Py_ssize_t e, Py_ssize_t m, Py_ssize_t n_real,
                            Py_ssize_t[::1] art_src) noexcept nogil:
    if e < n_real:
        return e // m
    return art_src[e - n_real]


cdef inline Py_ssize_t _tgt(Py_ssize_t e, Py_ssize_t n, Py_ssize_t m, Py_ssize_t n_real,
                            Py_ssize_t[::1] art_tgt) noexcept nogil:
    if e < n_real:
        return n + e % m
    return art_tgt[e - n_real]


def network_simplex(a, b, C, long max_iter):
    """Solve ``min <P, C>`` over couplings of ``a`` and ``b``.

    Same contract as the pure-Python fallback: returns
    ``(plan, alpha, beta, n_pivots, status)``.
    """
    cdef double[:, ::1] cost = np.ascontiguousarray(C, dtype=np.float64)
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = cost.shape[0], m = cost.shape[1]
    cdef Py_ssize_t n_nodes = n + m
    cdef Py_ssize_t n_real = n * m
    cdef Py_ssize_t n_arcs = n_real + n_nodes
    cdef Py_ssize_t root = n_nodes

    cdef double[::1] cost_flat = np.ascontiguousarray(C, dtype=np.float64).ravel()
    cdef double cmax = 0.0
    cdef Py_ssize_t e, k, i
    for e in range(n_real):
        if cost_flat[e] > cmax:
            cmax = cost_flat[e]
    cdef double art_cost = (cmax + 1.0) * (n_nodes + 1)
    cdef double eps = 1e-14 * art_cost

    cdef Py_ssize_t[::1] parent = np.zeros(n_nodes + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] pred = np.zeros(n_nodes + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] thread = np.zeros(n_nodes + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] rev_thread = np.zeros(n_nodes + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] succ_num = np.zeros(n_nodes + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] last_succ = np.zeros(n_nodes + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] pred_dir = np.zeros(n_nodes + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] dirty = np.zeros(n_nodes + 2, dtype=np.intp)
    cdef double[::1] pi = np.zeros(n_nodes + 1, dtype=np.float64)
    cdef signed char[::1] state = np.empty(n_arcs, dtype=np.int8)
    cdef double[::1] flow = np.zeros(n_arcs, dtype=np.float64)
    cdef Py_ssize_t[::1] art_src = np.zeros(n_nodes, dtype=np.intp)
    cdef Py_ssize_t[::1] art_tgt = np.zeros(n_nodes, dtype=np.intp)
    cdef double[::1] art_cst = np.zeros(n_nodes, dtype=np.float64)

    cdef double sup
    cdef Py_ssize_t u, v, p, w
    cdef Py_ssize_t in_arc, cnt, block, next_arc = 0, scanned
    cdef long n_pivots = 0
    cdef int status = 0, result
    cdef bint found
    cdef double best, c, delta, d, sigma
    cdef Py_ssize_t s_in, t_in, join, first, second, u_out, u_in, v_in, v_out
    cdef Py_ssize_t old_rev_thread, old_succ_num, old_last_succ
    cdef Py_ssize_t thread_continue, stem, par_stem, next_stem, last, before, after
    cdef Py_ssize_t n_dirty, tmp_sc, tmp_ls, up_limit_out, last_succ_out, end

    for e in range(n_real):
        state[e] = STATE_LOWER
    for e in range(n_real, n_arcs):
        state[e] = STATE_TREE

    parent[root] = -1
    pred[root] = -1
    thread[root] = 0
    rev_thread[0] = root
    succ_num[root] = n_nodes + 1
    last_succ[root] = root - 1
    for u in range(n_nodes):
        e = n_real + u
        parent[u] = root
        pred[u] = e
        thread[u] = u + 1
        rev_thread[u + 1] = u
        succ_num[u] = 1
        last_succ[u] = u
        sup = av[u] if u < n else -bv[u - n]
        if sup >= 0:
            pred_dir[u] = DIR_UP
            art_src[u] = u
            art_tgt[u] = root
            flow[e] = sup
        else:
            pred_dir[u] = DIR_DOWN
            pi[u] = art_cost
            art_src[u] = root
            art_tgt[u] = u
            flow[e] = -sup
            art_cst[u] = art_cost

    block = <Py_ssize_t>sqrt(<double>n_arcs)
    if block < 10:
        block = 10

    with nogil:
        while True:
            in_arc = -1
            best = -eps
            cnt = block
            e = next_arc
            found = False
            for scanned in range(n_arcs):
                if state[e] == STATE_LOWER:
                    if e < n_real:
                        c = cost_flat[e] + pi[e // m] - pi[n + e % m]
                    else:
                        k = e - n_real
                        c = art_cst[k] + pi[art_src[k]] - pi[art_tgt[k]]
                    if c < best:
                        best = c
                        in_arc = e
                e += 1
                if e == n_arcs:
                    e = 0
                cnt -= 1
                if cnt == 0:
                    if in_arc >= 0:
                        found = True
                        break
                    cnt = block
            if not found and in_arc < 0:
                break
            next_arc = e

            if n_pivots >= max_iter:
                status = 1
                break
            n_pivots += 1

            s_in = _src(in_arc, m, n_real, art_src)
            t_in = _tgt(in_arc, n, m, n_real, art_tgt)
            u = s_in
            v = t_in
            while u != v:
                if succ_num[u] < succ_num[v]:
                    u = parent[u]
                else:
                    v = parent[v]
            join = u

            first = s_in
            second = t_in
            delta = INFINITY
            result = 0
            u_out = -1
            u = first
            while u != join:
                if pred_dir[u] == DIR_UP:
                    d = flow[pred[u]]
                    if d < delta:
                        delta = d
                        u_out = u
                        result = 1
                u = parent[u]
            u = second
            while u != join:
                if pred_dir[u] == DIR_DOWN:
                    d = flow[pred[u]]
                    if d <= delta:
                        delta = d
                        u_out = u
                        result = 2
                u = parent[u]
            if result == 0:
                status = 2
                break
            if result == 1:
                u_in = first
                v_in = second
            else:
                u_in = second
                v_in = first

            if delta > 0:
                flow[in_arc] += delta
                u = s_in
                while u != join:
                    flow[pred[u]] -= pred_dir[u] * delta
                    u = parent[u]
                u = t_in
                while u != join:
                    flow[pred[u]] += pred_dir[u] * delta
                    u = parent[u]
            state[in_arc] = STATE_TREE
            state[pred[u_out]] = STATE_LOWER

            old_rev_thread = rev_thread[u_out]
            old_succ_num = succ_num[u_out]
            old_last_succ = last_succ[u_out]
            v_out = parent[u_out]

            if u_in == u_out:
                parent[u_in] = v_in
                pred[u_in] = in_arc
                pred_dir[u_in] = DIR_UP if u_in == s_in else DIR_DOWN
                if thread[v_in] != u_out:
                    after = thread[old_last_succ]
                    thread[old_rev_thread] = after
                    rev_thread[after] = old_rev_thread
                    after = thread[v_in]
                    thread[v_in] = u_out
                    rev_thread[u_out] = v_in
                    thread[old_last_succ] = after
                    rev_thread[after] = old_last_succ
            else:
                if old_rev_thread == v_in:
                    thread_continue = thread[old_last_succ]
                else:
                    thread_continue = thread[v_in]
                stem = u_in
                par_stem = v_in
                last = last_succ[u_in]
                after = thread[last]
                thread[v_in] = u_in
                dirty[0] = v_in
                n_dirty = 1
                while stem != u_out:
                    next_stem = parent[stem]
                    thread[last] = next_stem
                    dirty[n_dirty] = last
                    n_dirty += 1
                    before = rev_thread[stem]
                    thread[before] = after
                    rev_thread[after] = before
                    parent[stem] = par_stem
                    par_stem = stem
                    stem = next_stem
                    if last_succ[stem] == last_succ[par_stem]:
                        last = rev_thread[par_stem]
                    else:
                        last = last_succ[stem]
                    after = thread[last]
                parent[u_out] = par_stem
                thread[last] = thread_continue
                rev_thread[thread_continue] = last
                last_succ[u_out] = last
                if old_rev_thread != v_in:
                    thread[old_rev_thread] = after
                    rev_thread[after] = old_rev_thread
                for i in range(n_dirty):
                    w = dirty[i]
                    rev_thread[thread[w]] = w

                tmp_sc = 0
                tmp_ls = last_succ[u_out]
                u = u_out
                p = parent[u]
                while u != u_in:
                    pred[u] = pred[p]
                    pred_dir[u] = -pred_dir[p]
                    tmp_sc += succ_num[u] - succ_num[p]
                    succ_num[u] = tmp_sc
                    last_succ[p] = tmp_ls
                    u = p
                    p = parent[u]
                pred[u_in] = in_arc
                pred_dir[u_in] = DIR_UP if u_in == s_in else DIR_DOWN
                succ_num[u_in] = old_succ_num

            up_limit_out = join if last_succ[join] == v_in else -1
            last_succ_out = last_succ[u_out]
            u = v_in
            while u != -1 and last_succ[u] == v_in:
                last_succ[u] = last_succ_out
                u = parent[u]
            if join != old_rev_thread and v_in != old_rev_thread:
                u = v_out
                while u != up_limit_out and last_succ[u] == old_last_succ:
                    last_succ[u] = old_rev_thread
                    u = parent[u]
            elif last_succ_out != old_last_succ:
                u = v_out
                while u != up_limit_out and last_succ[u] == old_last_succ:
                    last_succ[u] = last_succ_out
                    u = parent[u]
            u = v_in
            while u != join:
                succ_num[u] += old_succ_num
                u = parent[u]
            u = v_out
            while u != join:
                succ_num[u] -= old_succ_num
                u = parent[u]

            if in_arc < n_real:
                c = cost_flat[in_arc]
            else:
                c = art_cst[in_arc - n_real]
            sigma = pi[v_in] - pi[u_in] - pred_dir[u_in] * c
            end = thread[last_succ[u_in]]
            u = u_in
            while u != end:
                pi[u] += sigma
                u = thread[u]

    plan = np.asarray(flow[:n_real]).reshape(n, m).copy()
    alpha = -np.asarray(pi[:n]).copy()
    beta = np.asarray(pi[n:n_nodes]).copy()
    return plan, alpha, beta, n_pivots, status
