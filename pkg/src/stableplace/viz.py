"""Optional scene snapshots (requires matplotlib)."""

from __future__ import annotations

import numpy as np

from .scene import Scene
from .se3 import decode_pose
from .shapes import ShapeCatalog


def _draw(ax, scene: Scene, catalog: ShapeCatalog, query_color="tab:red"):
    from mpl_toolkits.mplot3d.art3d import Poly3DCollection

    for i, o in enumerate(scene.objects):
        shape = catalog[o.shape]
        V = o.pose.apply(shape.vertices)
        polys = [V[list(f)] for f in shape.faces]
        color = query_color if i == scene.query_index else "tab:blue"
        ax.add_collection3d(Poly3DCollection(polys, facecolor=color, edgecolor="k", linewidths=0.3, alpha=0.8))
    ax.set_xlim(-0.2, 0.2)
    ax.set_ylim(-0.2, 0.2)
    ax.set_zlim(0.0, 0.4)
    ax.set_box_aspect((1, 1, 1))
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_zticks([])


def render_samples(scene: Scene, samples: list[dict], catalog: ShapeCatalog, path, max_panels: int = 8) -> None:
    """Generated (top row) and settled (bottom row) query poses, one column per sample."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    samples = samples[:max_panels]
    n = max(len(samples), 1)
    fig = plt.figure(figsize=(2.2 * n, 4.4))
    center = np.zeros(3)
    if scene.context:
        center[:2] = np.mean([o.pose.translation[:2] for o in scene.context], axis=0)
    for k, s in enumerate(samples):
        for row, key in enumerate(("pose", "settled_pose")):
            if key not in s:
                continue
            ax = fig.add_subplot(2, n, row * n + k + 1, projection="3d")
            pose = decode_pose(s[key])
            shifted = scene.with_query_pose(pose)
            shifted = shifted.with_poses([type(p)(p.rotation, p.translation - center) for p in shifted.poses])
            _draw(ax, shifted, catalog)
            if row == 0:
                ax.set_title(f"#{s['sample']}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
