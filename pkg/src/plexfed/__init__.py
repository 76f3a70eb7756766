"""plexfed: federated incremental learning for 3D binary segmentation,
exercised end to end on deterministic synthetic phantom volumes."""

from .volume import (DomainSpec, Mask, PhantomGeometryError, Volume,
                     generate_phantom, normalize_intensity)
from .volio import (VolumeChecksumError, VolumeFormatError, VolumeIOError,
                    VolumeTruncatedError, read_mask, read_volume, write_mask,
                    write_volume)
from .augment import augment
from .qc import QCReport, qc_screen
from .features import FeatureConfig, default_config_pool, extract_features
from .segmenter import (ModelBundle, OptimizerState, SegmenterParams,
                        adamw_step, binarize, decode_bundle, encode_bundle,
                        ensemble_predict, grad_loss, init_params, loss,
                        predict_probs, train)
from .pipeline import (InsufficientSubjectsError, InsufficientVolumesError,
                       fine_tune, initial_training, local_incremental_learn,
                       oracle_annotate)
from .metrics import (MetricsReport, RegressionFit, dice, dice_detail,
                      general_sample, median_iqr, ols_fit, volume_mm3)

__version__ = "0.1.0"
