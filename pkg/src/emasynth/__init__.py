"""EMA-to-acoustic articulatory synthesis toolkit.

Maps electromagnetic-articulography sensor trajectories to mel-cepstral
acoustic features and audio, for healthy and oral-cancer speech.  Ships the
full experimental pipeline: corpus handling, ingestion, LSTM regression,
MLPG trajectory smoothing, a reference vocoder, objective evaluation,
statistics, and a listening-test service.
"""

__version__ = "0.1.0"
