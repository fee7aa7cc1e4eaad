from ._dirnet import (
    Classifier,
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    batches_per_epoch,
    block_savings,
    identity_audit,
    lr_update,
    param_audit,
    param_ratio,
    receptive_extension,
    save_untrained,
    shape_trace,
    synthetic,
)

__version__ = "0.1.0"
