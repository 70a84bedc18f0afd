"""Decentralized federated learning over simulated D2D links."""
from .nn import Model, Batch, init_model, forward, loss_and_grad, sgd_step, eval_loss
from .datasets import RadarDataset, FeatureSet, FederatedPartition, load_radar, save_radar, preprocess, gen_synthetic, partition
from .comms import ChannelModel, Graph, SparseUpdate, ring_topology, metropolis_mixing, sparsify_topk, frame_count, transmit, round_accounting
from .protocols import Agent, ego_round, gossip_round, diffusion_round, dsgd_step, network_round
from .runner import ExperimentConfig, Trace, run, run_seeds, mean_trace, write_trace, read_trace, compare, load_config

__version__ = "0.1.0"
