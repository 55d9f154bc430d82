"""Multi-view spike pairing, rigid-invariant point-cloud features and
3D-to-2D distillation for spike volume regression."""
__version__ = "0.1.0"

from .camera import (BoundingBox, Camera, HomogeneousLine, ScaleEstimate, WeightedCenter,
                     apply_scale, epipolar_line, epipolar_lines, estimate_scale,
                     fundamental_matrix, line_intersects_box, lines_intersect_boxes, project,
                     triangulate, weighted_spike_center)
from .dataset import SpikeDataset, make_synthetic_dataset, split_families
from .estimators import (EnsembleRegressor, HistogramEncoderRegressor,
                         RegulatedTransformerRegressor)
from .exceptions import (BehindCameraError, CoincidentCentersError, ConfigError,
                         DegenerateLineError, DegeneratePairError, GeometryError,
                         InsufficientGeometryError, NoConsistentTriangulationError, StageError,
                         TrainingDivergedError, UndefinedMetricError)
from .losses import (GaussianPrediction, LatentFeature, MetricReport, batch_regulated_loss,
                     compute_metrics, feature_align_loss, gaussian_nll, mse_loss,
                     pc_student_loss, regulated_loss, rt_distill_loss)
from .pairing import (ClusterSet, PairingGraph, build_graph, consensus_clusters, edge_weight,
                      filter_small_clusters, label_propagation, pair_detections)
from .pipeline import PipelineConfig, RunManifest, benchmark_inference, run_pipeline
from .pointcloud import (DistanceHistogramTransformer, HistogramFeatures, PointCloud,
                         distance_histograms, prepare_cloud, rigid_transform,
                         sample_ellipsoid_surface, simulate_partial, subsample, voxel_downsample)
from .scene import (PairingScore, Scene, SceneConfig, SyntheticSpike, generate_scene,
                    score_pairing, view_count_breakdown)
from .training import (TrainConfig, distill_features, distill_pseudolabels, train_ensemble,
                       train_field_baseline, train_regulated, train_student, train_teacher)
