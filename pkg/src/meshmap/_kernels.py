"""numba kernels shared by the rasterizer and the voxelizer.

Coverage uses an exact top-left style ownership rule so that a sample point
lying on an edge shared by two adjacent triangles is counted exactly once.
"""
import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    # Evaluated with the lexicographically smaller endpoint first so that
    # _edge(a, b, p) == -_edge(b, a, p) holds bit-for-bit.
    if ax < bx or (ax == bx and ay < by):
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    return -((ax - bx) * (py - by) - (ay - by) * (px - bx))


@numba.njit(cache=True, inline="always")
def _owns(ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    return dy > 0.0 or (dy == 0.0 and dx < 0.0)


@numba.njit(cache=True, inline="always")
def _inside(w, ax, ay, bx, by):
    return w > 0.0 or (w == 0.0 and _owns(ax, ay, bx, by))


@numba.njit(cache=True)
def raster_faces(xy, inv_depth, faces, face_ok, width, height):
    """Z-buffered coverage of projected triangles at pixel centres.

    xy: (N, 2) image-plane positions; inv_depth: (N,) 1/z per vertex.
    Returns per-pixel face index (-1 = empty) and depth buffer (inf = empty).
    """
    face_idx = -np.ones((height, width), dtype=np.int64)
    zbuf = np.full((height, width), np.inf)
    for f in range(faces.shape[0]):
        if not face_ok[f]:
            continue
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        ax = xy[i0, 0]
        ay = xy[i0, 1]
        bx = xy[i1, 0]
        by = xy[i1, 1]
        cx = xy[i2, 0]
        cy = xy[i2, 1]
        za = inv_depth[i0]
        zb = inv_depth[i1]
        zc = inv_depth[i2]
        area = _edge(ax, ay, bx, by, cx, cy)
        if area == 0.0:
            continue
        if area < 0.0:
            bx, cx = cx, bx
            by, cy = cy, by
            zb, zc = zc, zb
            area = -area
        xmin = min(ax, min(bx, cx))
        xmax = max(ax, max(bx, cx))
        ymin = min(ay, min(by, cy))
        ymax = max(ay, max(by, cy))
        c0 = max(int(np.floor(xmin - 0.5)), 0)
        c1 = min(int(np.ceil(xmax - 0.5)), width - 1)
        r0 = max(int(np.floor(ymin - 0.5)), 0)
        r1 = min(int(np.ceil(ymax - 0.5)), height - 1)
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                w0 = _edge(bx, by, cx, cy, px, py)
                if not _inside(w0, bx, by, cx, cy):
                    continue
                w1 = _edge(cx, cy, ax, ay, px, py)
                if not _inside(w1, cx, cy, ax, ay):
                    continue
                w2 = _edge(ax, ay, bx, by, px, py)
                if not _inside(w2, ax, ay, bx, by):
                    continue
                # 1/z is affine in screen space
                iz = (w0 * za + w1 * zb + w2 * zc) / area
                if iz <= 0.0:
                    continue
                z = 1.0 / iz
                if z < zbuf[r, c]:
                    zbuf[r, c] = z
                    face_idx[r, c] = f
    return face_idx, zbuf


@numba.njit(cache=True)
def _exit_crossing(xy, faces, f, qx, qy, nx, ny):
    """Where segment q->n (q inside face f) leaves f.

    Returns (s, vertex_a, vertex_b, t): s in [0, 1] along q->n, and the edge
    parameter t so that crossing = (1 - t) * a + t * b.
    """
    best_s = -1.0
    best_a = -1
    best_b = -1
    best_t = 0.0
    dx = nx - qx
    dy = ny - qy
    for e in range(3):
        ia = faces[f, e]
        ib = faces[f, (e + 1) % 3]
        ax = xy[ia, 0]
        ay = xy[ia, 1]
        ex = xy[ib, 0] - ax
        ey = xy[ib, 1] - ay
        den = dx * ey - dy * ex
        if den == 0.0:
            continue
        # q + s d = a + t e
        s = ((ax - qx) * ey - (ay - qy) * ex) / den
        t = ((ax - qx) * dy - (ay - qy) * dx) / den
        # the exit point is the farthest crossing along q->n
        if s >= 0.0 and s <= 1.0 and t >= 0.0 and t <= 1.0:
            if best_a < 0 or s > best_s:
                best_s = s
                best_a = ia
                best_b = ib
                best_t = t
    if best_a < 0:
        # numerical corner case: take the closest edge crossing the line
        for e in range(3):
            ia = faces[f, e]
            ib = faces[f, (e + 1) % 3]
            ax = xy[ia, 0]
            ay = xy[ia, 1]
            ex = xy[ib, 0] - ax
            ey = xy[ib, 1] - ay
            den = dx * ey - dy * ex
            if den == 0.0:
                continue
            s = ((ax - qx) * ey - (ay - qy) * ex) / den
            t = ((ax - qx) * dy - (ay - qy) * dx) / den
            if t >= 0.0 and t <= 1.0 and s >= 0.0:
                if best_a < 0 or s < best_s:
                    best_s = min(s, 1.0)
                    best_a = ia
                    best_b = ib
                    best_t = t
    return best_s, best_a, best_b, best_t


@numba.njit(cache=True)
def raster_backward(grad, face_idx, xy, faces, radius, min_dist):
    """Edge-search approximation of d loss / d image-plane vertex positions.

    For each pixel whose flip would lower the loss, search along its row and
    column for the nearest silhouette transition, find the face edge causing
    it, and credit the edge's two vertices with ``(1 - t) / d`` and ``t / d``
    where ``d`` is the distance the edge has to travel to flip the pixel.
    """
    height, width = face_idx.shape
    out = np.zeros((xy.shape[0], 2))
    for r in range(height):
        for c in range(width):
            g = grad[r, c]
            if g == 0.0:
                continue
            covered = face_idx[r, c] >= 0
            if covered:
                ds = -1.0
            else:
                ds = 1.0
            if g * ds >= 0.0:
                continue
            px = c + 0.5
            py = r + 0.5
            for direction in range(4):
                if direction == 0:
                    sx, sy = 1, 0
                elif direction == 1:
                    sx, sy = -1, 0
                elif direction == 2:
                    sx, sy = 0, 1
                else:
                    sx, sy = 0, -1
                # q: covered pixel next to the transition, n: uncovered one
                found = False
                qr = r
                qc = c
                nr = r
                nc = c
                prev_r = r
                prev_c = c
                for k in range(1, radius + 1):
                    cr = r + k * sy
                    cc = c + k * sx
                    if cr < 0 or cr >= height or cc < 0 or cc >= width:
                        break
                    if (face_idx[cr, cc] >= 0) != covered:
                        found = True
                        if covered:
                            qr, qc = prev_r, prev_c
                            nr, nc = cr, cc
                        else:
                            qr, qc = cr, cc
                            nr, nc = prev_r, prev_c
                        break
                    prev_r = cr
                    prev_c = cc
                if not found:
                    continue
                f = face_idx[qr, qc]
                qx = qc + 0.5
                qy = qr + 0.5
                nx = nc + 0.5
                ny = nr + 0.5
                s, ia, ib, t = _exit_crossing(xy, faces, f, qx, qy, nx, ny)
                if ia < 0:
                    continue
                if sx != 0:
                    cross = qx + s * (nx - qx)
                    delta = px - cross
                    axis = 0
                else:
                    cross = qy + s * (ny - qy)
                    delta = py - cross
                    axis = 1
                if delta > 0.0:
                    u = 1.0
                else:
                    u = -1.0
                d = max(abs(delta), min_dist)
                scale = g * ds * u / d
                out[ia, axis] += scale * (1.0 - t)
                out[ib, axis] += scale * t
    return out


@numba.njit(cache=True)
def parity_fill(yz, xs, faces, y0, z0, dy, dz, x0, dx, ny, nz, nx):
    """Solid voxelization by +x ray parity from each cell centre.

    yz: (N, 2) vertex coordinates in the projection plane; xs: (N,) depth
    along the ray axis. Returns an (nx, ny, nz) boolean occupancy grid.
    """
    # bucket[m, j, k]: number of surface hits with exactly m cell centres before them
    bucket = np.zeros((nx + 1, ny, nz), dtype=np.int64)
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        ax = yz[i0, 0]
        ay = yz[i0, 1]
        bx = yz[i1, 0]
        by = yz[i1, 1]
        cx = yz[i2, 0]
        cy = yz[i2, 1]
        xa = xs[i0]
        xb = xs[i1]
        xc = xs[i2]
        area = _edge(ax, ay, bx, by, cx, cy)
        if area == 0.0:
            continue
        if area < 0.0:
            bx, cx = cx, bx
            by, cy = cy, by
            xb, xc = xc, xb
            area = -area
        jmin = max(int(np.floor((min(ax, min(bx, cx)) - y0) / dy - 0.5)), 0)
        jmax = min(int(np.ceil((max(ax, max(bx, cx)) - y0) / dy - 0.5)), ny - 1)
        kmin = max(int(np.floor((min(ay, min(by, cy)) - z0) / dz - 0.5)), 0)
        kmax = min(int(np.ceil((max(ay, max(by, cy)) - z0) / dz - 0.5)), nz - 1)
        for j in range(jmin, jmax + 1):
            py = y0 + (j + 0.5) * dy
            for k in range(kmin, kmax + 1):
                pz = z0 + (k + 0.5) * dz
                w0 = _edge(bx, by, cx, cy, py, pz)
                if not _inside(w0, bx, by, cx, cy):
                    continue
                w1 = _edge(cx, cy, ax, ay, py, pz)
                if not _inside(w1, cx, cy, ax, ay):
                    continue
                w2 = _edge(ax, ay, bx, by, py, pz)
                if not _inside(w2, ax, ay, bx, by):
                    continue
                xh = (w0 * xa + w1 * xb + w2 * xc) / area
                # count of cell centres strictly below the hit
                m = int(np.ceil((xh - x0) / dx - 0.5))
                if m < 0:
                    m = 0
                elif m > nx:
                    m = nx
                bucket[m, j, k] += 1
    occ = np.zeros((nx, ny, nz), dtype=np.bool_)
    for j in range(ny):
        for k in range(nz):
            above = 0
            for i in range(nx - 1, -1, -1):
                above += bucket[i + 1, j, k]
                occ[i, j, k] = (above % 2) == 1
    return occ


@numba.njit(cache=True)
def soft_iou_terms(s, s_hat):
    """Intersection and union sums of two equally shaped float masks."""
    inter = 0.0
    union = 0.0
    for r in range(s.shape[0]):
        for c in range(s.shape[1]):
            a = s[r, c]
            b = s_hat[r, c]
            inter += a * b
            union += a + b - a * b
    return inter, union


@numba.njit(cache=True)
def soft_iou_grad(s, inter, union):
    out = np.empty_like(s)
    k = inter / (union * union)
    for r in range(s.shape[0]):
        for c in range(s.shape[1]):
            out[r, c] = -s[r, c] / union + k * (1.0 - s[r, c])
    return out
