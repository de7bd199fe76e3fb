from .handle import (
    AutoencoderHandle,
    IdentityAutoencoder,
    SavePolicy,
    identity_handle,
    reconstruct,
    reconstruct_dataset,
    reconstruct_tensor,
)
from .ldm import LdmAutoencoderKL, LdmConfig
from .loader import load_external_autoencoder, load_ldm_autoencoder
from .toy import (
    ToyAutoencoder,
    ToyAutoencoderConfig,
    heldout_mse,
    load_toy_autoencoder,
    save_toy_autoencoder,
    train_toy_autoencoder,
)
