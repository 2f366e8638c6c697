from .protofed_aux import (
    Box,
    GradCheckReport,
    ParameterCheck,
    PayloadGroups,
    ProtoFedException,
    ConfigurationError,
    DataError,
    NumericError,
    ProtocolError,
    FormatError,
    VersionError,
)
from .protofed_types import (
    FreezeMode,
    OptimizerKind,
    Precision,
    Variant,
    DEFAULT_VARIANT_GRID,
)
from .Tensor import (
    Tensor,
    conv2d,
    relu,
    maxpool2d,
    linear,
    sliding_sq_l2,
    grad_check,
    inference_mode,
    exact_reductions,
    set_precision,
    get_dtype,
)
from .RunSettings import (
    FedConfig,
    BackboneConfig,
    LossWeights,
    DataConfig,
    InterpretSettings,
    WorkerSettings,
    RunSection,
    RunConfig,
    tiny_config,
)
from .Model import (
    AdapterModule,
    PrototypeLayer,
    ClassificationHead,
    ParamGroups,
    ModelOutput,
    adapter_forward,
    backbone_forward,
    prototype_similarities,
    head_logits,
    model_forward,
    init_params,
    calibrate_prototypes,
    save_params,
    load_params,
)
from .Loss import (
    LossBreakdown,
    cross_entropy,
    cluster_loss,
    separation_loss,
    adapter_l2,
    head_l1,
    proximal,
    local_loss,
)
from .Optimizer import SGD, Adam
from .Payload import RoundPayload, serialize_payload, deserialize_payload
from .SiteData import (
    SiteSpec,
    SiteDataset,
    SamplerState,
    BalancedSampler,
    generate_site,
    split_train_val,
    balanced_batches,
    build_sites,
)
from .Federation import (
    GlobalState,
    ClientState,
    RunReport,
    broadcast,
    local_update,
    aggregate,
    aggregation_weights,
    run_federation,
    compare_variants,
    train_centralized,
)
from .Interpret import (
    PrototypeActivation,
    activation_bbox,
    iou,
    explain,
    cross_client_agreement,
    localization_study,
)
from .image_utils import load_pnm, save_pnm, upsample_bilinear
from .Worker import Worker, WorkerResult
from .General import init, version, wrapper_version, set_log_level
