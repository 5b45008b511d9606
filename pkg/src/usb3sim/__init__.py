"""Deterministic desk-scale simulator of a USB 3.0 SuperSpeed device
controller and its host: LFPS signaling, link training, credit-based flow
control with retransmission, enumeration, and bulk transfer."""

from .sim_core import (
    BIT_TIME, MS, NS, PS, SECOND, SYMBOL_TIME, US, CausalityError, Channel,
    ChannelConfig, RunStats, Scheduler, SimEvent, SymbolBlock,
)
from .line_coding import (
    COMMA, K_CODES, RD_MINUS, RD_PLUS, CodecError, DisparityError,
    OrderedSetScanner, ScramblerState, crc5_lcw, crc16_header, crc32_payload,
    decode_8b10b, descramble, encode_8b10b, ordered_set_make,
    ordered_set_scan, scramble,
)
from .phy_model import (
    LfpsBurst, LfpsKind, LfpsTiming, Phy, PhyError, PhyWord, PipeSignals,
    burst_plan, lfps_classify, pack_lfps_words, standard_lfps_table,
)
from .ltssm import Action, Ltssm, LtssmConfig, LtssmEvent, LtssmState, TRANSITIONS, transition
from .link_layer import (
    HeaderPacket, LinkCommand, LinkCommandKind, LinkConfig, LinkLayer,
    PacketType, make_header_packet, wire_image,
)
from .protocol_layer import (
    DeviceDescriptorSet, DeviceInfo, DeviceProtocol, EndpointConfig,
    EndpointKind, EnumerationError, HostProtocol, PmtWorkload, TransferStats,
    ideal_bulk_rate_mbps, workload_preset_pmt,
)
from .harness import (
    BringupReport, PartnerModel, Scenario, ScenarioConfig, TraceError, Tracer,
    read_trace,
)

__version__ = "0.1.0"
