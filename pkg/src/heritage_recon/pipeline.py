"""Post-training steps shared by the command line and the test suite:
loading a checkpoint, mesh extraction and rendering held-out views."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ingest.scene import SceneBounds, SimilarityTransform
from .meshing.mesh import TriangleMesh, clip_to_sphere, colorize_vertices, filter_components, marching_cubes
from .model import NeuralScene
from .render.occupancy import OccupancyGrid
from .render.sampling import RenderConfig
from .render.volume import render_image
from .trainer import grid_from_checkpoint, load_model


@dataclass
class TrainedRun:
    model: NeuralScene
    grid: OccupancyGrid
    transform: SimilarityTransform
    bounds: SceneBounds
    render: RenderConfig
    meta: dict

    @classmethod
    def load(cls, checkpoint) -> "TrainedRun":
        model, arrays, meta = load_model(checkpoint)
        b = meta["bounds"]
        r = meta["render"]
        rcfg = RenderConfig(r["n_coarse"], r["n_importance"], model.s, r["upsample_s"], tuple(r["background"]))
        return cls(model, grid_from_checkpoint(arrays), SimilarityTransform.from_json(meta["transform"]),
                   SceneBounds(tuple(b["center"]), b["object_radius"], b["sampling_radius"]), rcfg, meta)

    def embedding(self, which: str | int = "average") -> np.ndarray:
        if which == "average":
            return self.model.average_embedding()
        return self.model.embedding_for(int(which))


def extract_mesh(model: NeuralScene, bounds: SceneBounds, resolution: int = 128, filter_mode: str = "keep-largest",
                 embedding: np.ndarray | None = None) -> TriangleMesh:
    """Zero level set inside the V_sfm sphere, in the normalized frame.

    With ``embedding`` the vertices are colored from the color field.
    """
    c = np.asarray(bounds.center, dtype=np.float64)
    r = bounds.sampling_radius
    mesh = marching_cubes(model.sdf.values, (tuple(c - r), tuple(c + r)), resolution)
    mesh = clip_to_sphere(mesh, c, r)
    mesh = filter_components(mesh, filter_mode, c, bounds.object_radius)
    if embedding is not None and not mesh.is_empty:
        mesh = colorize_vertices(mesh, model.color, model.sdf, embedding)
    return mesh


def mesh_to_original(mesh: TriangleMesh, transform: SimilarityTransform) -> TriangleMesh:
    """Undo the normalization; normals are unaffected by a uniform scale."""
    if len(mesh.vertices) == 0:
        return mesh
    return replace(mesh, vertices=transform.inverse(mesh.vertices))


def render_view(run: TrainedRun, camera, embedding: np.ndarray, chunk: int = 1024) -> dict[str, np.ndarray]:
    """Color, depth, normal and opacity images for ``camera`` (normalized frame)."""
    return render_image(run.model.sdf, run.model.color, camera, run.grid, embedding, run.model.s, run.render,
                        bound_radius=run.bounds.sampling_radius, chunk=chunk)
