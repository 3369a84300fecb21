from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import (
    IGNORE_ID,
    AllPositionsIgnored,
    NonScalarLoss,
    backward,
    cross_entropy,
    gelu,
    layer_norm,
    log_softmax,
    logsumexp,
    softmax,
)
from .gradcheck import GradCheckReport, grad_check
from .optim import Adam, AdamState, Schedule, ShapeMismatch, adam_step, adam_update
from .transformer import (
    DecoderStack,
    Encoder,
    IdOutOfRange,
    SequenceTooLong,
    TokenDecoder,
    TransformerConfig,
    decoder_forward,
    encoder_forward,
    init_parameters,
)
