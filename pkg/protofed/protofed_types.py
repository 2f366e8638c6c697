import numpy as np
from enum import Enum
import logging


__strToLogLevel__ = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
    "critical": logging.CRITICAL,
    "fatal": logging.FATAL,
}


def __inverseTranslationDict(translationDict):
    return {v: k for k, v in translationDict.items()}


class FreezeMode(Enum):
    FrozenRandom = 1
    WarmupPretrained = 2


__StrFreezeMode__ = {
    "frozen-random": FreezeMode.FrozenRandom,
    "warmup-pretrained": FreezeMode.WarmupPretrained,
}

__FreezeModeStr__ = __inverseTranslationDict(__StrFreezeMode__)


class OptimizerKind(Enum):
    Adam = 1
    SGD = 2


__StrOptimizerKind__ = {
    "adam": OptimizerKind.Adam,
    "sgd": OptimizerKind.SGD,
}

__OptimizerKindStr__ = __inverseTranslationDict(__StrOptimizerKind__)


class Precision(Enum):
    Double = 1
    Single = 2


__StrPrecision__ = {
    "double": Precision.Double,
    "single": Precision.Single,
}

__PrecisionStr__ = __inverseTranslationDict(__StrPrecision__)

__PrecisionDtype__ = {
    Precision.Double: np.float64,
    Precision.Single: np.float32,
}


class Variant(Enum):
    FedAvg = 1
    FedProx = 2
    FedAdapterNoProx = 3
    FedAdapter = 4
    FedProto = 5
    Ours = 6


__StrVariant__ = {
    "fedavg": Variant.FedAvg,
    "fedprox": Variant.FedProx,
    "fedadapter_noprox": Variant.FedAdapterNoProx,
    "fedadapter": Variant.FedAdapter,
    "fedproto": Variant.FedProto,
    "ours": Variant.Ours,
}

__VariantStr__ = __inverseTranslationDict(__StrVariant__)

DEFAULT_VARIANT_GRID = (
    Variant.FedAvg,
    Variant.FedProx,
    Variant.FedAdapter,
    Variant.FedProto,
    Variant.Ours,
)

# payload group bits
__PayloadGroupBits__ = {
    "adapters": 1,
    "prototypes": 2,
    "head": 4,
}

# wire dtype codes for checkpoint and payload tensor records
__DtypeCode__ = {
    np.dtype("<f8"): 1,
    np.dtype("<f4"): 2,
}

__CodeDtype__ = __inverseTranslationDict(__DtypeCode__)
