from .layers import Module, RMSNorm, SiLU, TGAttention, TGBlock, TGLinear, TGMLP, rms_norm
from .models import Autoencoder, Decoder, Denoiser, Encoder
from .optim import EMA, Adam, AdamState, adam_step
