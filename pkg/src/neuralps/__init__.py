"""Self-supervised photometric stereo with coordinate MLPs.

Recovers per-pixel surface normals, diffuse albedo, a learned specular basis,
depth and cast shadows from images of a static object under known directional
lights, by fitting three small MLPs through a differentiable rendering
equation.
"""

from .metrics import mae, psnr, render_brdf_sphere
from .nets import Model, ParamStore, PositionalEncoder, init_params
from .render import (Light, ShadowMarchConfig, half_vector, render_image,
                     render_pixel, render_shadow, render_shadow_map,
                     shadow_guidance_mask)
from .sceneio import (ObservationStack, SceneEstimate, SyntheticScene,
                      export_maps, load_dataset, make_composite_scene,
                      make_sphere_scene, make_step_scene, save_scene)
from .train import FitConfig, FitDivergenceError, LossReport, fit

__version__ = "0.1.0"
