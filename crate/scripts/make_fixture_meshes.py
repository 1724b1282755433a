#!/usr/bin/env python3
"""Generate the fixture meshes under fixtures/.

Meshes are built from concentric rings on star-shaped domains. The upper half
(y >= 0) is triangulated and mirrored across the x-axis, so every fixture is
exactly reflection symmetric. Electrodes are 16 evenly spaced boundary arcs
whose endpoints coincide with mesh nodes.

Usage: python3 scripts/make_fixture_meshes.py [outdir]
"""

import json
import math
import os
import sys

import numpy as np

N_ELECTRODES = 16


def chest_radius(theta):
    # Ellipse with a shallow notch at the back (negative y) for the spine.
    a, b = 0.175, 0.135
    r = a * b / math.sqrt((b * math.cos(theta)) ** 2 + (a * math.sin(theta)) ** 2)
    d = math.atan2(math.sin(theta + math.pi / 2), math.cos(theta + math.pi / 2))
    return r * (1.0 - 0.12 * math.exp(-((d / 0.35) ** 2)))


def ellipse_radius(a, b):
    def f(theta):
        return a * b / math.sqrt((b * math.cos(theta)) ** 2 + (a * math.sin(theta)) ** 2)

    return f


def disk_radius(r0):
    return lambda theta: r0


class Boundary:
    """Polar boundary r(theta) with an arclength-fraction parameterization."""

    def __init__(self, radius_fn, scale_to_perimeter=None, samples=20000):
        self.radius_fn = radius_fn
        self.scale = 1.0
        th = np.linspace(0.0, 2.0 * math.pi, samples + 1)
        pts = np.array([self._raw(t) for t in th])
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        perim = seg.sum()
        if scale_to_perimeter is not None:
            self.scale = scale_to_perimeter / perim
            perim = scale_to_perimeter
            seg = seg * self.scale
        self.perimeter = perim
        self.theta = th
        self.frac = np.concatenate([[0.0], np.cumsum(seg)]) / seg.sum()

    def _raw(self, theta):
        r = self.radius_fn(theta)
        return np.array([r * math.cos(theta), r * math.sin(theta)])

    def point(self, s):
        """Boundary point at arclength fraction s in [0, 1]."""
        theta = float(np.interp(s, self.frac, self.theta))
        return self.scale * self._raw(theta)

    def theta_of(self, s):
        return float(np.interp(s, self.frac, self.theta))


def outer_parameters(electrode_width_frac, m_e, m_g):
    """Arclength fractions on [0, 0.5] of the outer ring nodes (upper half).

    Electrode j spans [c_j - w/2, c_j + w/2] with c_j = (j + 0.5) / 16.
    Returns the node fractions and, per upper electrode, the edge indices it
    covers along the upper chain.
    """
    assert m_g % 2 == 0
    pitch = 1.0 / N_ELECTRODES
    w = electrode_width_frac
    gap = pitch - w
    nodes = [0.0]
    electrode_edges = []
    # half gap before electrode 0
    for i in range(1, m_g // 2 + 1):
        nodes.append(i * (gap / 2) / (m_g // 2))
    for j in range(N_ELECTRODES // 2):
        start = (j + 0.5) * pitch - w / 2
        edges = []
        for i in range(1, m_e + 1):
            edges.append(len(nodes) - 1)
            nodes.append(start + i * w / m_e)
        electrode_edges.append(edges)
        gap_start = start + w
        n_gap = m_g if j < N_ELECTRODES // 2 - 1 else m_g // 2
        for i in range(1, n_gap + 1):
            nodes.append(gap_start + i * gap / m_g)
    assert abs(nodes[-1] - 0.5) < 1e-12
    nodes[-1] = 0.5
    return nodes, electrode_edges


def merge_chains(inner, outer, inner_s, outer_s):
    """Triangulate the strip between two open chains ordered by parameter."""
    tris = []
    i, j = 0, 0
    while i < len(inner) - 1 or j < len(outer) - 1:
        if i == len(inner) - 1:
            adv_outer = True
        elif j == len(outer) - 1:
            adv_outer = False
        else:
            # advance the chain whose next node comes first along the boundary
            adv_outer = outer_s[j + 1] + 1e-12 < inner_s[i + 1] or (
                abs(outer_s[j + 1] - inner_s[i + 1]) <= 1e-12
                and (len(outer) - j) > (len(inner) - i)
            )
        if adv_outer:
            tris.append((inner[i], outer[j], outer[j + 1]))
            j += 1
        else:
            tris.append((inner[i], outer[j], inner[i + 1]))
            i += 1
    return tris


def signed_area(p, q, r):
    return 0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))


def ring_mesh(boundary, electrode_width, m_e, m_g, rings, quarter_turn=False):
    w_frac = electrode_width / boundary.perimeter
    outer_s, upper_electrodes = outer_parameters(w_frac, m_e, m_g)
    n_outer_edges = len(outer_s) - 1

    nodes = [np.array([0.0, 0.0])]
    chains = [[0]]
    chain_s = [[0.0]]
    for k in range(1, rings + 1):
        if k == rings:
            s_vals = outer_s
        else:
            n = max(2, int(round(n_outer_edges * k / rings)))
            s_vals = [0.5 * i / n for i in range(n + 1)]
        frac = k / rings
        chain = []
        for s in s_vals:
            nodes.append(frac * boundary.point(s))
            chain.append(len(nodes) - 1)
        chains.append(chain)
        chain_s.append(list(s_vals))

    tris = []
    # fan around the centre
    c1 = chains[1]
    for a, b in zip(c1[:-1], c1[1:]):
        tris.append((0, a, b))
    for k in range(2, rings + 1):
        tris.extend(merge_chains(chains[k - 1], chains[k], chain_s[k - 1], chain_s[k]))

    # fix orientation on the half mesh
    tris = [
        t if signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]) > 0 else (t[0], t[2], t[1])
        for t in tris
    ]

    # mirror across the x-axis
    n_half = len(nodes)
    mirror = {}
    for i in range(n_half):
        p = nodes[i]
        if abs(p[1]) < 1e-12:
            nodes[i] = np.array([p[0], 0.0])
            mirror[i] = i
        else:
            mirror[i] = len(nodes)
            nodes.append(np.array([p[0], -p[1]]))
    assert len(nodes) <= 2 * n_half
    mirrored = [(mirror[a], mirror[c], mirror[b]) for (a, b, c) in tris]
    tris = tris + mirrored

    # boundary loop: upper outer chain 0..0.5 then mirrored chain back to 0
    upper = chains[rings]
    lower = [mirror[i] for i in reversed(upper)]
    loop = upper + lower[1:]
    boundary_edges = [(loop[i], loop[i + 1]) for i in range(len(loop) - 1)]
    assert boundary_edges[-1][1] == loop[0]

    # electrodes: upper electrode j covers upper chain edges; mirror is 15 - j
    n_upper = len(upper) - 1
    electrodes = [None] * N_ELECTRODES
    for j, edges in enumerate(upper_electrodes):
        electrodes[j] = list(edges)
        # upper edge e (upper[e] -> upper[e+1]) mirrors to loop edge
        # n_upper + (n_upper - 1 - e)
        electrodes[N_ELECTRODES - 1 - j] = sorted(n_upper + (n_upper - 1 - e) for e in edges)
    if quarter_turn:
        nodes = [np.array([-p[1], p[0]]) for p in nodes]
    return renumber(nodes, tris, boundary_edges, electrodes)


def renumber(nodes, tris, boundary_edges, electrodes):
    nodes = [[float(p[0]), float(p[1])] for p in nodes]
    return {
        "nodes": nodes,
        "elements": [list(map(int, t)) for t in tris],
        "electrodes": electrodes,
        "boundary_edges": [list(map(int, e)) for e in boundary_edges],
    }


def refine(mesh, radius):
    """Red refinement; new boundary nodes are projected onto |x| = radius."""
    nodes = [list(p) for p in mesh["nodes"]]
    boundary_set = {tuple(sorted(e)) for e in mesh["boundary_edges"]}
    midpoint = {}

    def mid(a, b):
        key = (min(a, b), max(a, b))
        if key not in midpoint:
            pa, pb = nodes[a], nodes[b]
            m = [(pa[0] + pb[0]) / 2, (pa[1] + pb[1]) / 2]
            if key in boundary_set:
                r = math.hypot(m[0], m[1])
                m = [m[0] * radius / r, m[1] * radius / r]
            if abs(pa[1]) < 1e-15 and abs(pb[1]) < 1e-15:
                m[1] = 0.0
            midpoint[key] = len(nodes)
            nodes.append(m)
        return midpoint[key]

    elements = []
    for a, b, c in mesh["elements"]:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        elements += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
    boundary_edges = []
    child = {}
    for idx, (a, b) in enumerate(mesh["boundary_edges"]):
        m = mid(a, b)
        child[idx] = [len(boundary_edges), len(boundary_edges) + 1]
        boundary_edges += [[a, m], [m, b]]
    electrodes = [sorted(c for e in el for c in child[e]) for el in mesh["electrodes"]]
    return {
        "nodes": nodes,
        "elements": elements,
        "electrodes": electrodes,
        "boundary_edges": boundary_edges,
    }


def write(mesh, path):
    with open(path, "w") as f:
        json.dump(mesh, f, separators=(",", ":"))
        f.write("\n")
    print(f"{path}: {len(mesh['nodes'])} nodes, {len(mesh['elements'])} elements")


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "fixtures"
    os.makedirs(out, exist_ok=True)

    # The chest is left-right symmetric: mesh it a quarter turn back so the
    # symmetry axis is the x-axis, then rotate into place.
    chest = Boundary(lambda t: chest_radius(t + math.pi / 2), scale_to_perimeter=1.02)
    write(ring_mesh(chest, 0.020, m_e=2, m_g=6, rings=16, quarter_turn=True), f"{out}/chest_fine.mesh.json")
    write(ring_mesh(chest, 0.020, m_e=1, m_g=4, rings=10, quarter_turn=True), f"{out}/chest_recon.mesh.json")
    write(ring_mesh(chest, 0.020, m_e=1, m_g=2, rings=5, quarter_turn=True), f"{out}/chest_small.mesh.json")

    ellipse = Boundary(ellipse_radius(0.17, 0.125), scale_to_perimeter=1.02)
    write(ring_mesh(ellipse, 0.020, m_e=1, m_g=4, rings=10), f"{out}/ellipse_recon.mesh.json")

    radius = 0.15
    disk = Boundary(disk_radius(radius))
    base = ring_mesh(disk, 0.025, m_e=1, m_g=2, rings=4)
    write(base, f"{out}/disk_l0.mesh.json")
    level = base
    for i in range(1, 4):
        level = refine(level, radius)
        write(level, f"{out}/disk_l{i}.mesh.json")


if __name__ == "__main__":
    main()
