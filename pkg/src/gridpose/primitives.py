"""Primitive triangle meshes with known proper symmetry, used as fixtures.

All meshes are (T, 3, 3) float arrays in the body frame, meters. Helpers here
return ready-made :class:`~gridpose.geometry.ObjectModel` values whose
declared symmetry matches the actual shape:

* ``brick`` with one corner stud  -> no proper symmetry
* ``brick`` with two diagonal studs -> cyclic k=2 about z
* ``capped_cylinder`` with a cone top -> revolution about z
* ``icosphere`` -> rendering fixture (declared revolution)
"""

from __future__ import annotations

import numpy as np

from .geometry import ObjectModel, Symmetry


def _quad(a, b, c, d) -> list:
    return [[a, b, c], [a, c, d]]


def box_mesh(size) -> np.ndarray:
    """Axis-aligned box centered on the origin; size = (sx, sy, sz)."""
    hx, hy, hz = np.asarray(size, dtype=float) / 2.0
    p = lambda sx, sy, sz: (sx * hx, sy * hy, sz * hz)
    tris = []
    tris += _quad(p(-1, -1, 1), p(1, -1, 1), p(1, 1, 1), p(-1, 1, 1))  # +z
    tris += _quad(p(-1, -1, -1), p(-1, 1, -1), p(1, 1, -1), p(1, -1, -1))  # -z
    tris += _quad(p(-1, -1, -1), p(1, -1, -1), p(1, -1, 1), p(-1, -1, 1))  # -y
    tris += _quad(p(-1, 1, -1), p(-1, 1, 1), p(1, 1, 1), p(1, 1, -1))  # +y
    tris += _quad(p(1, -1, -1), p(1, 1, -1), p(1, 1, 1), p(1, -1, 1))  # +x
    tris += _quad(p(-1, -1, -1), p(-1, -1, 1), p(-1, 1, 1), p(-1, 1, -1))  # -x
    return np.asarray(tris, dtype=float)


def translated(mesh: np.ndarray, offset) -> np.ndarray:
    return np.asarray(mesh, dtype=float) + np.asarray(offset, dtype=float)


def icosphere_mesh(radius: float, subdivisions: int = 2) -> np.ndarray:
    """Icosahedron subdivided and projected onto the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    tris = verts[np.asarray(faces)]
    for _ in range(subdivisions):
        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        tris = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([ab, b, bc], axis=1),
                np.stack([ca, bc, c], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ]
        )
        flat = tris.reshape(-1, 3)
        tris = (flat / np.linalg.norm(flat, axis=1, keepdims=True)).reshape(-1, 3, 3)
    return radius * tris


def capped_cylinder_mesh(
    radius: float, height: float, segments: int = 24, top_cone_height: float = 0.0
) -> np.ndarray:
    """Cylinder about z with a flat bottom cap, centered on the origin.

    With ``top_cone_height`` > 0 the top cap becomes a cone, which breaks the
    end-swap flip so the proper symmetry is exactly the revolution about z.
    """
    ang = 2.0 * np.pi * np.arange(segments + 1) / segments
    x, y = radius * np.cos(ang), radius * np.sin(ang)
    zb, zt = -height / 2.0, height / 2.0
    tris = []
    for k in range(segments):
        b0, b1 = (x[k], y[k], zb), (x[k + 1], y[k + 1], zb)
        t0, t1 = (x[k], y[k], zt), (x[k + 1], y[k + 1], zt)
        tris += [[b0, b1, t1], [b0, t1, t0]]  # side
        tris.append([(0.0, 0.0, zb), b1, b0])  # bottom fan
        if top_cone_height > 0.0:
            tris.append([t0, t1, (0.0, 0.0, zt + top_cone_height)])
        else:
            tris.append([(0.0, 0.0, zt), t0, t1])
    return np.asarray(tris, dtype=float)


def studded_brick_mesh(size, stud_size, n_studs: int = 2) -> np.ndarray:
    """Brick with studs on its top face.

    Two studs at diagonally opposite positions leave exactly the two-fold
    rotation about z; a single stud removes all proper symmetry.
    """
    if n_studs not in (1, 2):
        raise ValueError("n_studs must be 1 or 2")
    sx, sy, sz = np.asarray(size, dtype=float)
    bx, by, bz = np.asarray(stud_size, dtype=float)
    parts = [box_mesh(size)]
    dx, dy = sx / 2 - bx / 2, sy / 2 - by / 2
    spots = [(dx, dy), (-dx, -dy)][:n_studs]
    for px, py in spots:
        parts.append(translated(box_mesh(stud_size), (px, py, sz / 2 + bz / 2)))
    return np.concatenate(parts)


def mesh_diameter(mesh: np.ndarray) -> float:
    """Diameter of the origin-centered bounding sphere."""
    return 2.0 * float(np.linalg.norm(np.asarray(mesh, dtype=float).reshape(-1, 3), axis=1).max())


def _model(object_id: str, mesh: np.ndarray, symmetry: Symmetry) -> ObjectModel:
    return ObjectModel(object_id, mesh_diameter(mesh), symmetry, mesh=mesh)


def make_object(kind: str, scale: float = 1.0) -> ObjectModel:
    """Named demo objects with matching declared symmetry.

    kinds: ``brick_nosym``, ``brick_c2``, ``cone_cylinder`` (revolution),
    ``sphere`` (rendering fixture).
    """
    if kind == "brick_nosym":
        mesh = studded_brick_mesh(
            (0.11 * scale, 0.07 * scale, 0.04 * scale),
            (0.03 * scale, 0.03 * scale, 0.02 * scale),
            n_studs=1,
        )
        return _model(kind, mesh, Symmetry.none())
    if kind == "brick_c2":
        mesh = studded_brick_mesh(
            (0.11 * scale, 0.07 * scale, 0.04 * scale),
            (0.03 * scale, 0.03 * scale, 0.02 * scale),
            n_studs=2,
        )
        return _model(kind, mesh, Symmetry.cyclic(2))
    if kind == "cone_cylinder":
        mesh = capped_cylinder_mesh(
            0.045 * scale, 0.12 * scale, segments=24, top_cone_height=0.04 * scale
        )
        return _model(kind, mesh, Symmetry.revolution())
    if kind == "sphere":
        mesh = icosphere_mesh(0.05 * scale, subdivisions=2)
        return _model(kind, mesh, Symmetry.revolution())
    raise ValueError(f"unknown object kind {kind!r}")
