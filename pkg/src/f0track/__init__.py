"""Neural-network F0 trackers (DNN regression, RNN encoder regression, DNN-HMM)
with a YIN baseline, GPE/FPE evaluation and a synthetic-corpus harness."""

from .dsp import FramingConfig, Spectrogram, spectrogram
from .evaluate import EvalConfig, aggregate, score_utterance
from .features import ContextConfig, NormStats, Quantizer
from .models import TrackerModel, load_model, save_model, track, train_tracker
from .nn import TrainConfig
from .signal_io import F0Contour, Waveform, read_wav, write_wav
from .yin import YinConfig, yin_track

__version__ = "0.1.0"
