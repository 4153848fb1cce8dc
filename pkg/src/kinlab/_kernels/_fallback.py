"""Pure-Python implementations of the hot kernels.

Every function here has a twin in ``_core.pyx`` with identical arithmetic
order, so both backends produce the same floating-point results.
"""

import heapq
import math

import numpy as np

from ..errors import TripleCollision

SIMULTANEITY = 1e-12
GRAZING = 1e-12
LOG_WIDTH = 16  # t, normal(3), pre v_i v_j (6), post v_i v_j (6)


class _EventSim:
    def __init__(self, pos, vel, radius, side, ncell, do_log):
        self.n = n = len(pos)
        self.X = pos.tolist()
        self.V = vel.tolist()
        self.TL = [0.0] * n
        self.cnt = [0] * n
        self.side = side
        self.half = 0.5 * side
        self.sig2 = 4.0 * radius * radius
        self.diam = 2.0 * radius
        self.nc = nc = ncell
        self.w = side / nc
        self.heap = []
        self.do_log = do_log
        self.logf = []
        self.logi = []
        self.ncross = 0
        self.cell = []
        self.members = {}
        for p in range(n):
            c = []
            for k in range(3):
                ck = int(math.floor(self.X[p][k] / self.w))
                if ck >= nc:
                    ck = nc - 1
                if ck < 0:
                    ck = 0
                c.append(ck)
            self.cell.append(c)
            self.members.setdefault(self._flat(c), []).append(p)

    def _flat(self, c):
        return (c[0] * self.nc + c[1]) * self.nc + c[2]

    def _neighbours(self, p):
        if self.nc == 1:
            return [q for q in range(self.n) if q != p]
        nc = self.nc
        cx, cy, cz = self.cell[p]
        out = []
        for dx in (-1, 0, 1):
            x = (cx + dx) % nc
            for dy in (-1, 0, 1):
                y = (cy + dy) % nc
                for dz in (-1, 0, 1):
                    z = (cz + dz) % nc
                    for q in self.members.get((x * nc + y) * nc + z, ()):
                        if q != p:
                            out.append(q)
        return out

    def touch(self, p, t):
        dt = t - self.TL[p]
        xp = self.X[p]
        vp = self.V[p]
        side = self.side
        for k in range(3):
            x = xp[k] + vp[k] * dt
            x = x - side * math.floor(x / side)
            if x >= side:
                x = 0.0
            xp[k] = x
        self.TL[p] = t

    def predict(self, i, j, t):
        side = self.side
        xi = self.X[i]
        xj = self.X[j]
        vi = self.V[i]
        vj = self.V[j]
        dti = t - self.TL[i]
        dtj = t - self.TL[j]
        dx = (xi[0] + vi[0] * dti) - (xj[0] + vj[0] * dtj)
        dy = (xi[1] + vi[1] * dti) - (xj[1] + vj[1] * dtj)
        dz = (xi[2] + vi[2] * dti) - (xj[2] + vj[2] * dtj)
        gx = vi[0] - vj[0]
        gy = vi[1] - vj[1]
        gz = vi[2] - vj[2]
        if self.nc > 1:
            dx = dx - side * math.floor(dx / side + 0.5)
            dy = dy - side * math.floor(dy / side + 0.5)
            dz = dz - side * math.floor(dz / side + 0.5)
            return self._root(dx, dy, dz, gx, gy, gz, t)
        # single box: both particles stay in one copy until touched, so one
        # of the 27 neighbouring images carries the next contact
        best = None
        for mx in (-1.0, 0.0, 1.0):
            for my in (-1.0, 0.0, 1.0):
                for mz in (-1.0, 0.0, 1.0):
                    te = self._root(dx + mx * side, dy + my * side, dz + mz * side, gx, gy, gz, t)
                    if te is not None and (best is None or te < best):
                        best = te
        return best

    def _root(self, dx, dy, dz, gx, gy, gz, t):
        b = dx * gx + dy * gy + dz * gz
        if b >= 0.0:
            return None
        g2 = gx * gx + gy * gy + gz * gz
        c = dx * dx + dy * dy + dz * dz - self.sig2
        disc = b * b - g2 * c
        if disc <= 0.0:
            return None
        sq = math.sqrt(disc)
        if sq < GRAZING * self.diam:
            return None
        if c <= 0.0:
            return t
        return t + c / (sq - b)

    def push_pair(self, a, b, t):
        te = self.predict(a, b, t)
        if te is not None:
            if a > b:
                a, b = b, a
            heapq.heappush(self.heap, (te, a, b, self.cnt[a], self.cnt[b]))

    def push_crossing(self, p, t):
        best = math.inf
        axis = -1
        xp = self.X[p]
        vp = self.V[p]
        cp = self.cell[p]
        for k in range(3):
            v = vp[k]
            if v == 0.0:
                continue
            rel = xp[k] - cp[k] * self.w
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
            heapq.heappush(self.heap, (t + best, p, self.n + axis, self.cnt[p], 0))

    def repredict(self, p, t):
        self.push_crossing(p, t)
        for q in self._neighbours(p):
            self.push_pair(p, q, t)

    def cross(self, p, axis, t):
        self.touch(p, t)
        old = self._flat(self.cell[p])
        step = 1 if self.V[p][axis] > 0.0 else -1
        if self.nc == 1:
            # force the wrap; rounding may leave the coordinate just inside
            x = self.X[p][axis]
            if step > 0 and x > self.half:
                self.X[p][axis] = x - self.side
            elif step < 0 and x < self.half:
                self.X[p][axis] = x + self.side
        self.cell[p][axis] = (self.cell[p][axis] + step) % self.nc
        self.members[old].remove(p)
        self.members.setdefault(self._flat(self.cell[p]), []).append(p)
        self.cnt[p] += 1
        self.ncross += 1
        self.repredict(p, t)

    def collide(self, a, b, t):
        self.touch(a, t)
        self.touch(b, t)
        side = self.side
        xa = self.X[a]
        xb = self.X[b]
        dx = xa[0] - xb[0]
        dy = xa[1] - xb[1]
        dz = xa[2] - xb[2]
        dx = dx - side * math.floor(dx / side + 0.5)
        dy = dy - side * math.floor(dy / side + 0.5)
        dz = dz - side * math.floor(dz / side + 0.5)
        dist = math.sqrt(dx * dx + dy * dy + dz * dz)
        nx = dx / dist
        ny = dy / dist
        nz = dz / dist
        va = self.V[a]
        vb = self.V[b]
        gn = (va[0] - vb[0]) * nx + (va[1] - vb[1]) * ny + (va[2] - vb[2]) * nz
        if abs(gn) < GRAZING:
            return
        pre = va + vb
        va[0] = va[0] - gn * nx
        va[1] = va[1] - gn * ny
        va[2] = va[2] - gn * nz
        vb[0] = vb[0] + gn * nx
        vb[1] = vb[1] + gn * ny
        vb[2] = vb[2] + gn * nz
        if self.do_log:
            self.logf.append([t, nx, ny, nz] + pre + va + vb)
            self.logi.append((a, b))

    def valid(self, ev):
        _, i, j, ci, cj = ev
        if ci != self.cnt[i]:
            return False
        return j >= self.n or cj == self.cnt[j]

    def run(self, horizon):
        n = self.n
        heap = self.heap
        for i in range(n):
            self.push_crossing(i, 0.0)
            for j in self._neighbours(i):
                if j > i:
                    self.push_pair(i, j, 0.0)
        while heap:
            if heap[0][0] > horizon:
                break
            ev = heapq.heappop(heap)
            if not self.valid(ev):
                continue
            te, i, j = ev[0], ev[1], ev[2]
            if j >= n:
                self.cross(i, j - n, te)
                continue
            batch = [(te, i, j)]
            deferred = []
            while heap and heap[0][0] <= te + SIMULTANEITY:
                e2 = heapq.heappop(heap)
                if not self.valid(e2):
                    continue
                if e2[2] >= n:
                    deferred.append(e2)
                elif any(a == e2[1] and b == e2[2] for _, a, b in batch):
                    # both partners of a pair re-predict it after a collision
                    continue
                else:
                    batch.append((e2[0], e2[1], e2[2]))
            if len(batch) > 1:
                seen = set()
                for _, a, b in batch:
                    if a in seen or b in seen:
                        raise TripleCollision(
                            f"particles {sorted(seen | {a, b})} in simultaneous contact near t={te:.17g}"
                        )
                    seen.add(a)
                    seen.add(b)
            for tb, a, b in batch:
                self.collide(a, b, tb)
            for e2 in deferred:
                heapq.heappush(heap, e2)
            for _, a, b in batch:
                self.cnt[a] += 1
                self.cnt[b] += 1
            for tb, a, b in batch:
                self.repredict(a, tb)
                self.repredict(b, tb)
        for p in range(n):
            self.touch(p, horizon)


def evolve_events(pos, vel, radius, side, horizon, ncell, do_log=True):
    """Advance hard spheres by ``horizon``; ``pos`` and ``vel`` are updated in place.

    Returns (float log (k, 16), pair log (k, 2), number of cell crossings).
    """
    sim = _EventSim(pos, vel, float(radius), float(side), int(ncell), bool(do_log))
    sim.run(float(horizon))
    pos[:] = np.asarray(sim.X, dtype=float).reshape(pos.shape)
    vel[:] = np.asarray(sim.V, dtype=float).reshape(vel.shape)
    logf = np.asarray(sim.logf, dtype=float).reshape(-1, LOG_WIDTH)
    logi = np.asarray(sim.logi, dtype=np.int64).reshape(-1, 2)
    return logf, logi, sim.ncross


def insert_spheres(pos, n_placed, candidates, radius, side, ncell, fail_run, max_consecutive):
    """Sequential rejection insertion of sphere centres.

    Consumes ``candidates`` in order, appending each non-overlapping one to
    ``pos`` (rows ``n_placed`` onward) until ``pos`` is full.  Returns
    (n_placed, n_consumed, fail_run, restart) where ``restart`` signals that
    ``max_consecutive`` failures in a row occurred.
    """
    n_total = len(pos)
    sig2 = 4.0 * radius * radius
    nc = ncell
    w = side / nc
    members = {}
    placed = pos[:n_placed].tolist()

    def cell_of(x):
        c = []
        for k in range(3):
            ck = int(math.floor(x[k] / w))
            if ck >= nc:
                ck = nc - 1
            c.append(ck)
        return c

    for q, x in enumerate(placed):
        c = cell_of(x)
        members.setdefault((c[0] * nc + c[1]) * nc + c[2], []).append(q)

    cand = candidates.tolist()
    consumed = 0
    restart = False
    for x in cand:
        if n_placed >= n_total:
            break
        consumed += 1
        c = cell_of(x)
        if nc == 1:
            near = range(n_placed)
        else:
            near = []
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        key = (((c[0] + dx) % nc) * nc + (c[1] + dy) % nc) * nc + (c[2] + dz) % nc
                        near.extend(members.get(key, ()))
        ok = True
        for q in near:
            y = placed[q]
            dx = x[0] - y[0]
            dy = x[1] - y[1]
            dz = x[2] - y[2]
            dx = dx - side * math.floor(dx / side + 0.5)
            dy = dy - side * math.floor(dy / side + 0.5)
            dz = dz - side * math.floor(dz / side + 0.5)
            if dx * dx + dy * dy + dz * dz < sig2:
                ok = False
                break
        if ok:
            placed.append(x)
            members.setdefault((c[0] * nc + c[1]) * nc + c[2], []).append(n_placed)
            pos[n_placed] = x
            n_placed += 1
            fail_run = 0
        else:
            fail_run += 1
            if fail_run >= max_consecutive:
                restart = True
                break
    return n_placed, consumed, fail_run, restart


def dsmc_collide(vel, ii, jj, normals, uniforms, gmax):
    """Process DSMC candidate pairs in order (sequential semantics, chunked).

    Candidate k is accepted when 0 < g.n and u_k * gmax < g.n with g the
    current relative velocity.  Returns (accepted, overflow_index) where
    overflow_index is the first candidate with g.n > gmax (processing stops
    there) or -1.
    """
    K = len(ii)
    k0 = 0
    n_acc = 0
    chunk = 256
    while k0 < K:
        k1 = min(K, k0 + chunk)
        I = ii[k0:k1]
        J = jj[k0:k1]
        nrm = normals[k0:k1]
        g = vel[I] - vel[J]
        gn = g[:, 0] * nrm[:, 0] + g[:, 1] * nrm[:, 1] + g[:, 2] * nrm[:, 2]
        acc = (gn > 0.0) & (uniforms[k0:k1] * gmax < gn)
        m = k1 - k0
        a_idx = np.flatnonzero(acc)
        if a_idx.size:
            ids = np.concatenate([I[a_idx], J[a_idx]])
            where = np.concatenate([a_idx, a_idx])
            order = np.lexsort((where, ids))
            ids_s = ids[order]
            where_s = where[order]
            uniq, first = np.unique(ids_s, return_index=True)
            first_pos = where_s[first]
            local = np.arange(m)

            def first_touch(P):
                loc = np.searchsorted(uniq, P)
                loc = np.minimum(loc, uniq.size - 1)
                return np.where(uniq[loc] == P, first_pos[loc], m + 1)

            conflict = (first_touch(I) < local) | (first_touch(J) < local)
            hits = np.flatnonzero(conflict)
            if hits.size:
                m = int(hits[0])
        over = np.flatnonzero(gn[:m] > gmax)
        stop = -1
        if over.size:
            stop = int(over[0])
            m = stop
        sel = a_idx[a_idx < m]
        if sel.size:
            Ia = I[sel]
            Ja = J[sel]
            gs = gn[sel]
            ns = nrm[sel]
            for c in range(3):
                vel[Ia, c] = vel[Ia, c] - gs * ns[:, c]
                vel[Ja, c] = vel[Ja, c] + gs * ns[:, c]
            n_acc += sel.size
        if stop >= 0:
            return n_acc, k0 + stop
        if m == k1 - k0:
            chunk = min(chunk * 2, 1 << 16)
        else:
            chunk = max(64, chunk // 2)
        k0 += m
    return n_acc, -1
