# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: event-driven hard-sphere flow, sphere insertion, DSMC collisions.

Arithmetic mirrors ``_fallback.py`` operation for operation; build without
fast-math or FMA contraction so both backends agree bit for bit.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, fabs, INFINITY
from libc.stdlib cimport malloc, realloc, free

from ..errors import TripleCollision

cnp.import_array()

cdef double SIMULTANEITY = 1e-12
cdef double GRAZING = 1e-12
cdef enum:
    LOG_WIDTH = 16

ctypedef long long i64

cdef struct Event:
    double t
    i64 i
    i64 j
    i64 ci
    i64 cj


cdef inline bint ev_less(Event* a, Event* b) noexcept nogil:
    if a.t != b.t:
        return a.t < b.t
    if a.i != b.i:
        return a.i < b.i
    if a.j != b.j:
        return a.j < b.j
    if a.ci != b.ci:
        return a.ci < b.ci
    return a.cj < b.cj


cdef inline i64 imod(i64 a, i64 m) noexcept nogil:
    cdef i64 r = a % m
    if r < 0:
        r += m
    return r


cdef inline double wrap_disp(double d, double side) noexcept nogil:
    return d - side * floor(d / side + 0.5)


cdef class _EventSim:
    cdef double[:, ::1] X
    cdef double[:, ::1] V
    cdef double* TL
    cdef i64* cnt
    cdef i64* cell
    cdef i64* head
    cdef i64* nxt
    cdef i64* prv
    cdef i64 n, nc
    cdef double side, half, w, sig2, diam
    cdef Event* heap
    cdef Py_ssize_t hsize, hcap
    cdef double* logf
    cdef i64* logi
    cdef Py_ssize_t nlog, logcap
    cdef bint do_log
    cdef i64 ncross
    cdef i64* nbuf
    cdef Py_ssize_t nbuf_cap

    def __cinit__(self, double[:, ::1] X, double[:, ::1] V, double radius, double side,
                  i64 ncell, bint do_log):
        cdef i64 n = X.shape[0], p, k, ck, nc3
        cdef i64* tail
        self.X = X
        self.V = V
        self.n = n
        self.side = side
        self.half = 0.5 * side
        self.sig2 = 4.0 * radius * radius
        self.diam = 2.0 * radius
        self.nc = ncell
        self.w = side / ncell
        self.do_log = do_log
        self.ncross = 0
        nc3 = ncell * ncell * ncell
        self.TL = <double*> malloc(max(n, 1) * sizeof(double))
        self.cnt = <i64*> malloc(max(n, 1) * sizeof(i64))
        self.cell = <i64*> malloc(max(3 * n, 1) * sizeof(i64))
        self.nxt = <i64*> malloc(max(n, 1) * sizeof(i64))
        self.prv = <i64*> malloc(max(n, 1) * sizeof(i64))
        self.head = <i64*> malloc(nc3 * sizeof(i64))
        self.hcap = 1024
        self.hsize = 0
        self.heap = <Event*> malloc(self.hcap * sizeof(Event))
        self.logcap = 256
        self.nlog = 0
        self.logf = <double*> malloc(self.logcap * LOG_WIDTH * sizeof(double))
        self.logi = <i64*> malloc(self.logcap * 2 * sizeof(i64))
        self.nbuf_cap = max(n, 16)
        self.nbuf = <i64*> malloc(self.nbuf_cap * sizeof(i64))
        if (self.TL == NULL or self.cnt == NULL or self.cell == NULL or self.nxt == NULL
                or self.prv == NULL or self.head == NULL or self.heap == NULL
                or self.logf == NULL or self.logi == NULL or self.nbuf == NULL):
            raise MemoryError()
        for k in range(nc3):
            self.head[k] = -1
        for p in range(n):
            self.TL[p] = 0.0
            self.cnt[p] = 0
            for k in range(3):
                ck = <i64> floor(self.X[p, k] / self.w)
                if ck >= ncell:
                    ck = ncell - 1
                if ck < 0:
                    ck = 0
                self.cell[3 * p + k] = ck
        # append in index order so per-cell member order matches the fallback
        tail = <i64*> malloc(nc3 * sizeof(i64))
        if tail == NULL:
            raise MemoryError()
        for k in range(nc3):
            tail[k] = -1
        for p in range(n):
            k = self.flat(p)
            self.nxt[p] = -1
            self.prv[p] = tail[k]
            if tail[k] >= 0:
                self.nxt[tail[k]] = p
            else:
                self.head[k] = p
            tail[k] = p
        free(tail)

    def __dealloc__(self):
        free(self.TL)
        free(self.cnt)
        free(self.cell)
        free(self.nxt)
        free(self.prv)
        free(self.head)
        free(self.heap)
        free(self.logf)
        free(self.logi)
        free(self.nbuf)

    cdef inline i64 flat(self, i64 p) noexcept nogil:
        return (self.cell[3 * p] * self.nc + self.cell[3 * p + 1]) * self.nc + self.cell[3 * p + 2]

    cdef void unlink(self, i64 p) noexcept nogil:
        cdef i64 k = self.flat(p)
        if self.prv[p] >= 0:
            self.nxt[self.prv[p]] = self.nxt[p]
        else:
            self.head[k] = self.nxt[p]
        if self.nxt[p] >= 0:
            self.prv[self.nxt[p]] = self.prv[p]

    cdef void link_tail(self, i64 p) noexcept nogil:
        cdef i64 k = self.flat(p)
        cdef i64 q = self.head[k]
        self.nxt[p] = -1
        if q < 0:
            self.head[k] = p
            self.prv[p] = -1
            return
        while self.nxt[q] >= 0:
            q = self.nxt[q]
        self.nxt[q] = p
        self.prv[p] = q

    cdef int push(self, double t, i64 i, i64 j, i64 ci, i64 cj) except -1:
        cdef Event e
        cdef Event* grown
        cdef Py_ssize_t pos, parent
        if self.hsize == self.hcap:
            grown = <Event*> realloc(self.heap, 2 * self.hcap * sizeof(Event))
            if grown == NULL:
                raise MemoryError()
            self.heap = grown
            self.hcap *= 2
        e.t = t
        e.i = i
        e.j = j
        e.ci = ci
        e.cj = cj
        pos = self.hsize
        self.hsize += 1
        while pos > 0:
            parent = (pos - 1) >> 1
            if ev_less(&e, &self.heap[parent]):
                self.heap[pos] = self.heap[parent]
                pos = parent
            else:
                break
        self.heap[pos] = e
        return 0

    cdef Event pop(self) noexcept nogil:
        cdef Event top = self.heap[0]
        cdef Event last
        cdef Py_ssize_t pos = 0, child, size
        self.hsize -= 1
        size = self.hsize
        if size > 0:
            last = self.heap[size]
            while True:
                child = 2 * pos + 1
                if child >= size:
                    break
                if child + 1 < size and ev_less(&self.heap[child + 1], &self.heap[child]):
                    child += 1
                if ev_less(&self.heap[child], &last):
                    self.heap[pos] = self.heap[child]
                    pos = child
                else:
                    break
            self.heap[pos] = last
        return top

    cdef inline bint valid(self, Event* e) noexcept nogil:
        if e.ci != self.cnt[e.i]:
            return False
        return e.j >= self.n or e.cj == self.cnt[e.j]

    cdef void touch(self, i64 p, double t) noexcept nogil:
        cdef double dt = t - self.TL[p]
        cdef double x
        cdef int k
        for k in range(3):
            x = self.X[p, k] + self.V[p, k] * dt
            x = x - self.side * floor(x / self.side)
            if x >= self.side:
                x = 0.0
            self.X[p, k] = x
        self.TL[p] = t

    cdef bint predict(self, i64 i, i64 j, double t, double* out) noexcept nogil:
        cdef double side = self.side
        cdef double dti = t - self.TL[i]
        cdef double dtj = t - self.TL[j]
        cdef double dx, dy, dz, gx, gy, gz, te, best = 0.0, mx, my, mz
        cdef bint found = False
        cdef int a, b, c
        dx = (self.X[i, 0] + self.V[i, 0] * dti) - (self.X[j, 0] + self.V[j, 0] * dtj)
        dy = (self.X[i, 1] + self.V[i, 1] * dti) - (self.X[j, 1] + self.V[j, 1] * dtj)
        dz = (self.X[i, 2] + self.V[i, 2] * dti) - (self.X[j, 2] + self.V[j, 2] * dtj)
        gx = self.V[i, 0] - self.V[j, 0]
        gy = self.V[i, 1] - self.V[j, 1]
        gz = self.V[i, 2] - self.V[j, 2]
        if self.nc > 1:
            dx = wrap_disp(dx, side)
            dy = wrap_disp(dy, side)
            dz = wrap_disp(dz, side)
            return self.root(dx, dy, dz, gx, gy, gz, t, out)
        for a in range(3):
            mx = <double> (a - 1)
            for b in range(3):
                my = <double> (b - 1)
                for c in range(3):
                    mz = <double> (c - 1)
                    if self.root(dx + mx * side, dy + my * side, dz + mz * side, gx, gy, gz, t, &te):
                        if not found or te < best:
                            best = te
                            found = True
        if found:
            out[0] = best
        return found

    cdef inline bint root(self, double dx, double dy, double dz, double gx, double gy, double gz,
                          double t, double* out) noexcept nogil:
        cdef double b, g2, c, disc, sq
        b = dx * gx + dy * gy + dz * gz
        if b >= 0.0:
            return False
        g2 = gx * gx + gy * gy + gz * gz
        c = dx * dx + dy * dy + dz * dz - self.sig2
        disc = b * b - g2 * c
        if disc <= 0.0:
            return False
        sq = sqrt(disc)
        if sq < GRAZING * self.diam:
            return False
        if c <= 0.0:
            out[0] = t
        else:
            out[0] = t + c / (sq - b)
        return True

    cdef int push_pair(self, i64 a, i64 b, double t) except -1:
        cdef double te
        cdef i64 tmp
        if self.predict(a, b, t, &te):
            if a > b:
                tmp = a
                a = b
                b = tmp
            self.push(te, a, b, self.cnt[a], self.cnt[b])
        return 0

    cdef int push_crossing(self, i64 p, double t) except -1:
        cdef double best = INFINITY, v, rel, dt
        cdef int axis = -1, k
        for k in range(3):
            v = self.V[p, k]
            if v == 0.0:
                continue
            rel = self.X[p, k] - self.cell[3 * p + k] * self.w
            if self.nc > 1:
                if rel > self.half:
                    rel = rel - self.side
                elif rel <= -self.half:
                    rel = rel + self.side
            if v > 0.0:
                dt = (self.w - rel) / v
            else:
                dt = rel / (-v)
            if dt < 0.0:
                dt = 0.0
            if dt < best:
                best = dt
                axis = k
        if axis >= 0:
            self.push(t + best, p, self.n + axis, self.cnt[p], 0)
        return 0

    cdef Py_ssize_t neighbours(self, i64 p) noexcept nogil:
        """Fill nbuf with candidate partners of p (same order as the fallback)."""
        cdef Py_ssize_t m = 0
        cdef i64 q, cx, cy, cz, x, y, z, dx, dy, dz, nc = self.nc
        if nc == 1:
            for q in range(self.n):
                if q != p:
                    self.nbuf[m] = q
                    m += 1
            return m
        cx = self.cell[3 * p]
        cy = self.cell[3 * p + 1]
        cz = self.cell[3 * p + 2]
        for dx in range(-1, 2):
            x = imod(cx + dx, nc)
            for dy in range(-1, 2):
                y = imod(cy + dy, nc)
                for dz in range(-1, 2):
                    z = imod(cz + dz, nc)
                    q = self.head[(x * nc + y) * nc + z]
                    while q >= 0:
                        if q != p:
                            self.nbuf[m] = q
                            m += 1
                        q = self.nxt[q]
        return m

    cdef int repredict(self, i64 p, double t) except -1:
        cdef Py_ssize_t m, a
        self.push_crossing(p, t)
        m = self.neighbours(p)
        for a in range(m):
            self.push_pair(p, self.nbuf[a], t)
        return 0

    cdef int cross(self, i64 p, int axis, double t) except -1:
        cdef i64 step
        cdef double x
        self.touch(p, t)
        self.unlink(p)
        step = 1 if self.V[p, axis] > 0.0 else -1
        if self.nc == 1:
            x = self.X[p, axis]
            if step > 0 and x > self.half:
                self.X[p, axis] = x - self.side
            elif step < 0 and x < self.half:
                self.X[p, axis] = x + self.side
        self.cell[3 * p + axis] = imod(self.cell[3 * p + axis] + step, self.nc)
        self.link_tail(p)
        self.cnt[p] += 1
        self.ncross += 1
        self.repredict(p, t)
        return 0

    cdef int collide(self, i64 a, i64 b, double t) except -1:
        cdef double side = self.side
        cdef double dx, dy, dz, dist, nx, ny, nz, gn
        cdef double* row
        cdef double* grown
        cdef i64* grown_i
        cdef int k
        self.touch(a, t)
        self.touch(b, t)
        dx = wrap_disp(self.X[a, 0] - self.X[b, 0], side)
        dy = wrap_disp(self.X[a, 1] - self.X[b, 1], side)
        dz = wrap_disp(self.X[a, 2] - self.X[b, 2], side)
        dist = sqrt(dx * dx + dy * dy + dz * dz)
        nx = dx / dist
        ny = dy / dist
        nz = dz / dist
        gn = ((self.V[a, 0] - self.V[b, 0]) * nx + (self.V[a, 1] - self.V[b, 1]) * ny
              + (self.V[a, 2] - self.V[b, 2]) * nz)
        if fabs(gn) < GRAZING:
            return 0
        if self.do_log:
            if self.nlog == self.logcap:
                grown = <double*> realloc(self.logf, 2 * self.logcap * LOG_WIDTH * sizeof(double))
                if grown == NULL:
                    raise MemoryError()
                self.logf = grown
                grown_i = <i64*> realloc(self.logi, 2 * self.logcap * 2 * sizeof(i64))
                if grown_i == NULL:
                    raise MemoryError()
                self.logi = grown_i
                self.logcap *= 2
            row = self.logf + self.nlog * LOG_WIDTH
            row[0] = t
            row[1] = nx
            row[2] = ny
            row[3] = nz
            for k in range(3):
                row[4 + k] = self.V[a, k]
                row[7 + k] = self.V[b, k]
        self.V[a, 0] = self.V[a, 0] - gn * nx
        self.V[a, 1] = self.V[a, 1] - gn * ny
        self.V[a, 2] = self.V[a, 2] - gn * nz
        self.V[b, 0] = self.V[b, 0] + gn * nx
        self.V[b, 1] = self.V[b, 1] + gn * ny
        self.V[b, 2] = self.V[b, 2] + gn * nz
        if self.do_log:
            for k in range(3):
                row[10 + k] = self.V[a, k]
                row[13 + k] = self.V[b, k]
            self.logi[2 * self.nlog] = a
            self.logi[2 * self.nlog + 1] = b
            self.nlog += 1
        return 0

    cdef int run(self, double horizon) except -1:
        cdef i64 n = self.n, i, j, p
        cdef Py_ssize_t m, a, nb, nd, bcap = 16, dcap = 16, u, w
        cdef int dup
        cdef Event ev, e2
        cdef double te
        cdef Event* batch = <Event*> malloc(bcap * sizeof(Event))
        cdef Event* deferred = <Event*> malloc(dcap * sizeof(Event))
        cdef Event* grown
        if batch == NULL or deferred == NULL:
            free(batch)
            free(deferred)
            raise MemoryError()
        try:
            for i in range(n):
                self.push_crossing(i, 0.0)
                m = self.neighbours(i)
                for a in range(m):
                    j = self.nbuf[a]
                    if j > i:
                        self.push_pair(i, j, 0.0)
            while self.hsize > 0:
                if self.heap[0].t > horizon:
                    break
                ev = self.pop()
                if not self.valid(&ev):
                    continue
                te = ev.t
                if ev.j >= n:
                    self.cross(ev.i, <int> (ev.j - n), te)
                    continue
                batch[0] = ev
                nb = 1
                nd = 0
                while self.hsize > 0 and self.heap[0].t <= te + SIMULTANEITY:
                    e2 = self.pop()
                    if not self.valid(&e2):
                        continue
                    if e2.j >= n:
                        if nd == dcap:
                            grown = <Event*> realloc(deferred, 2 * dcap * sizeof(Event))
                            if grown == NULL:
                                raise MemoryError()
                            deferred = grown
                            dcap *= 2
                        deferred[nd] = e2
                        nd += 1
                    else:
                        # both partners of a pair re-predict it after a collision;
                        # drop the second copy of an identical event
                        dup = 0
                        for u in range(nb):
                            if batch[u].i == e2.i and batch[u].j == e2.j:
                                dup = 1
                                break
                        if dup:
                            continue
                        if nb == bcap:
                            grown = <Event*> realloc(batch, 2 * bcap * sizeof(Event))
                            if grown == NULL:
                                raise MemoryError()
                            batch = grown
                            bcap *= 2
                        batch[nb] = e2
                        nb += 1
                if nb > 1:
                    for u in range(nb):
                        for w in range(u):
                            if (batch[u].i == batch[w].i or batch[u].i == batch[w].j
                                    or batch[u].j == batch[w].i or batch[u].j == batch[w].j):
                                involved = sorted({batch[u].i, batch[u].j, batch[w].i, batch[w].j})
                                raise TripleCollision(
                                    f"particles {involved} in simultaneous contact near t={te:.17g}"
                                )
                for u in range(nb):
                    self.collide(batch[u].i, batch[u].j, batch[u].t)
                for u in range(nd):
                    e2 = deferred[u]
                    self.push(e2.t, e2.i, e2.j, e2.ci, e2.cj)
                for u in range(nb):
                    self.cnt[batch[u].i] += 1
                    self.cnt[batch[u].j] += 1
                for u in range(nb):
                    self.repredict(batch[u].i, batch[u].t)
                    self.repredict(batch[u].j, batch[u].t)
            for p in range(n):
                self.touch(p, horizon)
        finally:
            free(batch)
            free(deferred)
        return 0

    def logs(self):
        cdef Py_ssize_t k
        logf = np.empty((self.nlog, LOG_WIDTH), dtype=np.float64)
        logi = np.empty((self.nlog, 2), dtype=np.int64)
        cdef double[:, ::1] lf = logf
        cdef i64[:, ::1] li = logi
        for k in range(self.nlog * LOG_WIDTH):
            lf[k // LOG_WIDTH, k % LOG_WIDTH] = self.logf[k]
        for k in range(self.nlog):
            li[k, 0] = self.logi[2 * k]
            li[k, 1] = self.logi[2 * k + 1]
        return logf, logi


def evolve_events(pos, vel, double radius, double side, double horizon, i64 ncell, bint do_log=True):
    """Advance hard spheres by ``horizon``; ``pos`` and ``vel`` are updated in place.

    Returns (float log (k, 16), pair log (k, 2), number of cell crossings).
    """
    X = np.ascontiguousarray(pos, dtype=np.float64)
    V = np.ascontiguousarray(vel, dtype=np.float64)
    cdef _EventSim sim = _EventSim(X, V, radius, side, ncell, do_log)
    sim.run(horizon)
    pos[:] = X
    vel[:] = V
    logf, logi = sim.logs()
    return logf, logi, sim.ncross


def insert_spheres(double[:, ::1] pos, i64 n_placed, double[:, ::1] candidates, double radius,
                   double side, i64 ncell, i64 fail_run, i64 max_consecutive):
    """Sequential rejection insertion; see the fallback for the contract."""
    cdef i64 n_total = pos.shape[0], n_cand = candidates.shape[0]
    cdef double sig2 = 4.0 * radius * radius
    cdef i64 nc = ncell, nc3 = ncell * ncell * ncell
    cdef double w = side / ncell
    cdef i64 q, k, c0, c1, c2, dx, dy, dz, key, consumed = 0
    cdef double ex, ey, ez
    cdef bint ok, restart = False
    cdef i64* head = <i64*> malloc(nc3 * sizeof(i64))
    cdef i64* nxt = <i64*> malloc(max(n_total, 1) * sizeof(i64))
    if head == NULL or nxt == NULL:
        free(head)
        free(nxt)
        raise MemoryError()
    try:
        for k in range(nc3):
            head[k] = -1
        for q in range(n_placed):
            key = _cell_key(pos[q, 0], pos[q, 1], pos[q, 2], w, nc)
            nxt[q] = head[key]
            head[key] = q
        for k in range(n_cand):
            if n_placed >= n_total:
                break
            consumed += 1
            c0 = _cell_idx(candidates[k, 0], w, nc)
            c1 = _cell_idx(candidates[k, 1], w, nc)
            c2 = _cell_idx(candidates[k, 2], w, nc)
            ok = True
            if nc == 1:
                for q in range(n_placed):
                    if _overlaps(candidates, k, pos, q, side, sig2):
                        ok = False
                        break
            else:
                for dx in range(-1, 2):
                    if not ok:
                        break
                    for dy in range(-1, 2):
                        if not ok:
                            break
                        for dz in range(-1, 2):
                            key = ((imod(c0 + dx, nc) * nc + imod(c1 + dy, nc)) * nc
                                   + imod(c2 + dz, nc))
                            q = head[key]
                            while q >= 0:
                                if _overlaps(candidates, k, pos, q, side, sig2):
                                    ok = False
                                    break
                                q = nxt[q]
                            if not ok:
                                break
            if ok:
                pos[n_placed, 0] = candidates[k, 0]
                pos[n_placed, 1] = candidates[k, 1]
                pos[n_placed, 2] = candidates[k, 2]
                key = (c0 * nc + c1) * nc + c2
                nxt[n_placed] = head[key]
                head[key] = n_placed
                n_placed += 1
                fail_run = 0
            else:
                fail_run += 1
                if fail_run >= max_consecutive:
                    restart = True
                    break
    finally:
        free(head)
        free(nxt)
    return n_placed, consumed, fail_run, restart


cdef inline i64 _cell_idx(double x, double w, i64 nc) noexcept nogil:
    cdef i64 c = <i64> floor(x / w)
    if c >= nc:
        c = nc - 1
    return c


cdef inline i64 _cell_key(double x, double y, double z, double w, i64 nc) noexcept nogil:
    return (_cell_idx(x, w, nc) * nc + _cell_idx(y, w, nc)) * nc + _cell_idx(z, w, nc)


cdef inline bint _overlaps(double[:, ::1] c, i64 k, double[:, ::1] p, i64 q, double side,
                           double sig2) noexcept nogil:
    cdef double dx = wrap_disp(c[k, 0] - p[q, 0], side)
    cdef double dy = wrap_disp(c[k, 1] - p[q, 1], side)
    cdef double dz = wrap_disp(c[k, 2] - p[q, 2], side)
    return dx * dx + dy * dy + dz * dz < sig2


def dsmc_collide(double[:, ::1] vel, i64[::1] ii, i64[::1] jj, double[:, ::1] normals,
                 double[::1] uniforms, double gmax):
    """Sequential DSMC candidate processing; see the fallback for the contract."""
    cdef Py_ssize_t K = ii.shape[0], k, stop = -1
    cdef i64 i, j, n_acc = 0
    cdef double gn, nx, ny, nz
    with nogil:
        for k in range(K):
            i = ii[k]
            j = jj[k]
            nx = normals[k, 0]
            ny = normals[k, 1]
            nz = normals[k, 2]
            gn = (vel[i, 0] - vel[j, 0]) * nx + (vel[i, 1] - vel[j, 1]) * ny + (vel[i, 2] - vel[j, 2]) * nz
            if gn > gmax:
                stop = k
                break
            if gn > 0.0 and uniforms[k] * gmax < gn:
                vel[i, 0] = vel[i, 0] - gn * nx
                vel[i, 1] = vel[i, 1] - gn * ny
                vel[i, 2] = vel[i, 2] - gn * nz
                vel[j, 0] = vel[j, 0] + gn * nx
                vel[j, 1] = vel[j, 1] + gn * ny
                vel[j, 2] = vel[j, 2] + gn * nz
                n_acc += 1
    return n_acc, stop
