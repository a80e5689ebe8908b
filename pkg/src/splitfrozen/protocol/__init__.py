from .engine import (DeviceSession, DeviceState, IngestedBatch, ProtocolError, ServerEngine,
                     device_end_round, device_forward_and_send, device_register, round_seed, serve,
                     server_accept_registration, server_handle, server_ingest, server_round_step)
from .runner import SplitRunResult, run_splitfrozen, sample_rows
from .transport import (LoopbackTransport, RecordingTransport, SocketTransport, Transport,
                        replay_frames, socket_pair)
from .wire import (DTYPE_F32, DTYPE_F64, ActivationBatch, RegisterMsg, RoundEndMsg, WireError,
                   decode, encode, split_frames)

__all__ = [
    "ActivationBatch", "DTYPE_F32", "DTYPE_F64", "DeviceSession", "DeviceState", "IngestedBatch",
    "LoopbackTransport", "ProtocolError", "RecordingTransport", "RegisterMsg", "RoundEndMsg",
    "ServerEngine", "SocketTransport", "SplitRunResult", "Transport", "WireError", "decode",
    "device_end_round", "device_forward_and_send", "device_register", "encode", "replay_frames",
    "round_seed", "run_splitfrozen", "sample_rows", "serve", "server_accept_registration",
    "server_handle", "server_ingest", "server_round_step", "socket_pair", "split_frames",
]
