"""latentwarp: GAN inversion with flow-warped high-rate residual features.

Invert an image into a per-layer style code plus residual features the code
cannot carry; when the code is edited, predict the feature-space motion the
edit induces, warp the residuals along it, refine, and inject them back into
the generator at the finest feature resolution.
"""

from .config import (ConfigError, DataConfig, LossWeights, ModelConfig,
                     PathsConfig, ScheduleConfig, TAP_KEYS, TrainConfig,
                     learning_rate_at, load_config, preset, save_config)
from .latent import (EditDirection, LatentCode, LatentSeed, MappingNetwork,
                     apply_direction, load_direction, reverse_edit,
                     sample_edit_alpha, sample_z, save_direction, simulate_edit)
from .generator import (ConvStyleGenerator, Discriminator, GeneratorTaps,
                        ProceduralGenerator, TrainingDiverged,
                        load_generator_bundle, pretrain_toy_generator)
from .encoders import (BaseEncoder, BaseEncoding, Refiner, ResidualDetector,
                       train_base_encoder)
from .flowwarp import (FlowOracleConfig, FlowPredictor, flow_to_color,
                       predict_flow, pseudo_gt_flow, read_flo, rescale_flow,
                       resample_image, warp, write_flo)
from .data import SceneSampler, render_detail_blobs, sample_detail_blobs
from .pipeline import (InversionPipeline, PassResult, build_pipeline,
                       load_pipeline, save_pipeline)
from .training import (PathKind, Trainer, TrainState, discriminator_objective,
                       loss_adversarial, loss_feature_reg, loss_flow,
                       loss_identity, loss_perceptual, loss_rec_l2)
from .metrics import (DiscriminatorEmbedding, DiscriminatorFeatures,
                      IdentityEmbedder, frechet_distance, id_score,
                      identity_features, perceptual_distance, ssim)
from .evalprotocols import (LabeledDataset, MetricReport, eval_edit_attribute,
                            eval_edit_fidelity, eval_edit_pose,
                            eval_reconstruction, load_dataset, load_png,
                            make_dataset, measure_runtime, run_ablation,
                            save_dataset, save_png, train_variant)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
