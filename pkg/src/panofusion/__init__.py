"""Neural radiance fields from a single equirectangular RGB-D panorama.

The input panorama is reprojected to virtual camera positions; the field is
trained with color, rendered-depth and embedding-consistency losses.
"""

from .geometry import CameraPose, angles_to_dir, dir_to_pixel, panorama_ray_grid, pixel_to_angles
from .reprojection import Panorama, TrainingFrame, backproject, generate_training_set, \
    project_to_pose, sample_virtual_poses
from .field import FieldConfig, RadianceField, load_checkpoint, save_checkpoint
from .rendering import SamplingConfig, composite, render_panorama, render_rays
from .losses import LossWeights, ToyEncoder, color_loss, geo_loss, semantic_loss, total_loss
from .training import TrainConfig, Trainer, train
from .evaluation import evaluate, psnr, ssim
from .scene import BoxScene, synth_box_scene

__version__ = "0.1.0"
