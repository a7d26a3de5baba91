from .colmap import (CameraModel, ColmapModel, ColmapParseError, ImagePose, SparseCloud, UnsupportedCameraModelError,
                     qvec_to_rotmat, read_colmap_text, rotmat_to_qvec, write_colmap_text)
from .images import (DEFAULT_GRAY_TOLERANCE, ImageLoadError, Placement, detect_grayscale, load_and_resize_image,
                     load_mask, save_png)
from .scene import (DegenerateCloudError, DenseCloud, ImageRecord, Scene, SceneBounds, SceneError, SimilarityTransform,
                    assign_visibility_from_sparse, load_bundle, load_dense_cloud, normalize_scene, parse_colmap_text,
                    read_transform, sparse_visible_points,
                    visible_points, write_normalized_bundle, write_transform)
