"""Pure-Python network simplex for the dense transportation problem.

Reference implementation of the kernel compiled in ``_simplex.pyx``. Both
modules expose the same ``network_simplex`` function and must return the
same plans for the same inputs; the compiled one is only faster.

The spanning tree is stored with parent / thread / successor-count arrays
and pivots keep it strongly feasible, which rules out cycling on the
heavily degenerate instances produced by uniform weights.
"""

import math

import numpy as np

STATE_TREE = 0
STATE_LOWER = 1
DIR_UP = 1
DIR_DOWN = -1

STATUS_OPTIMAL = 0
STATUS_MAX_ITER = 1
STATUS_UNBOUNDED = 2


def network_simplex(a, b, C, max_iter):
    """Solve ``min <P, C>`` over couplings of ``a`` and ``b``.

    ``C`` should be scaled to ``[0, 1]`` by the caller and ``sum(a)`` must
    equal ``sum(b)``. Returns ``(plan, alpha, beta, n_pivots, status)``
    where ``alpha[i] + beta[j] <= C[i, j]`` holds at optimality.
    """
    C = np.ascontiguousarray(C, dtype=np.float64)
    n, m = C.shape
    cost_flat = C.ravel().tolist()
    n_nodes = n + m
    n_real = n * m
    n_arcs = n_real + n_nodes
    root = n_nodes

    cmax = max(cost_flat) if cost_flat else 0.0
    art_cost = (cmax + 1.0) * (n_nodes + 1)
    eps = 1e-14 * art_cost

    supply = [float(x) for x in a] + [-float(x) for x in b]

    parent = [0] * (n_nodes + 1)
    pred = [0] * (n_nodes + 1)
    thread = [0] * (n_nodes + 1)
    rev_thread = [0] * (n_nodes + 1)
    succ_num = [0] * (n_nodes + 1)
    last_succ = [0] * (n_nodes + 1)
    pred_dir = [0] * (n_nodes + 1)
    pi = [0.0] * (n_nodes + 1)
    state = [STATE_LOWER] * n_real + [STATE_TREE] * n_nodes
    flow = [0.0] * n_arcs
    art_src = [0] * n_nodes
    art_tgt = [0] * n_nodes
    art_cst = [0.0] * n_nodes

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
        if supply[u] >= 0:
            pred_dir[u] = DIR_UP
            art_src[u] = u
            art_tgt[u] = root
            flow[e] = supply[u]
        else:
            pred_dir[u] = DIR_DOWN
            pi[u] = art_cost
            art_src[u] = root
            art_tgt[u] = u
            flow[e] = -supply[u]
            art_cst[u] = art_cost

    def src(e):
        return e // m if e < n_real else art_src[e - n_real]

    def tgt(e):
        return n + e % m if e < n_real else art_tgt[e - n_real]

    def cst(e):
        return cost_flat[e] if e < n_real else art_cst[e - n_real]

    block = max(int(math.sqrt(n_arcs)), 10)
    next_arc = 0
    n_pivots = 0
    status = STATUS_OPTIMAL

    while True:
        # block search pricing; strict '<' keeps the lowest index on ties
        in_arc = -1
        best = -eps
        cnt = block
        e = next_arc
        found = False
        for _ in range(n_arcs):
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
            status = STATUS_MAX_ITER
            break
        n_pivots += 1

        # join node of the cycle
        s_in = src(in_arc)
        t_in = tgt(in_arc)
        u, v = s_in, t_in
        while u != v:
            if succ_num[u] < succ_num[v]:
                u = parent[u]
            else:
                v = parent[v]
        join = u

        # leaving arc: last blocking arc in cycle orientation
        first, second = s_in, t_in
        delta = math.inf
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
            status = STATUS_UNBOUNDED
            break
        if result == 1:
            u_in, v_in = first, second
        else:
            u_in, v_in = second, first

        # augment along the cycle
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

        # re-hang the subtree cut at u_out below v_in
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
            thread_continue = (thread[old_last_succ] if old_rev_thread == v_in
                               else thread[v_in])
            stem = u_in
            par_stem = v_in
            last = last_succ[u_in]
            after = thread[last]
            thread[v_in] = u_in
            dirty = [v_in]
            while stem != u_out:
                next_stem = parent[stem]
                thread[last] = next_stem
                dirty.append(last)
                before = rev_thread[stem]
                thread[before] = after
                rev_thread[after] = before
                parent[stem] = par_stem
                par_stem = stem
                stem = next_stem
                last = (rev_thread[par_stem]
                        if last_succ[stem] == last_succ[par_stem]
                        else last_succ[stem])
                after = thread[last]
            parent[u_out] = par_stem
            thread[last] = thread_continue
            rev_thread[thread_continue] = last
            last_succ[u_out] = last
            if old_rev_thread != v_in:
                thread[old_rev_thread] = after
                rev_thread[after] = old_rev_thread
            for w in dirty:
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

        # shift potentials of the moved subtree
        sigma = pi[v_in] - pi[u_in] - pred_dir[u_in] * cst(in_arc)
        end = thread[last_succ[u_in]]
        u = u_in
        while u != end:
            pi[u] += sigma
            u = thread[u]

    plan = np.asarray(flow[:n_real], dtype=np.float64).reshape(n, m)
    alpha = -np.asarray(pi[:n], dtype=np.float64)
    beta = np.asarray(pi[n:n_nodes], dtype=np.float64)
    return plan, alpha, beta, n_pivots, status
