from .camera import Camera, CameraError, Ray, RayBatch, generate_ray, generate_rays, sphere_bounds
from .occupancy import OccupancyGrid, build_occupancy_grid, update_occupancy_grid
from .sampling import RaySampleSet, RenderConfig, neus_weights, sample_ray, sample_rays
from .volume import RenderOutput, render_image, render_ray, render_rays, sharpness
