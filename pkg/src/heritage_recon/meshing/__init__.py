from .mesh import (MeshError, TriangleMesh, clip_to_sphere, colorize_vertices, colors_to_u8, component_labels,
                   export_mesh, filter_components, marching_cubes, marching_cubes_grid, read_mesh, sample_lattice)
