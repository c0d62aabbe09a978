"""Rowhammer fault-injection simulator and key-recovery attack framework."""

from .dram import (AddressMapping, BankWindow, Direction, Dram, DramGeometry, FlipCell, FlipEvent,
                   FlipModel, HammerConfig, hammer, map_address)
from .memos import AslrPolicy, Machine, PageAllocator, PageFrameCache, Process
from .profiler import PageClass, PageProfile, classify, classify_counts
from .synthesis import SynthesisParams, synthesize_dram
from .victim import ChannelMode, Countermeasures, VictimConfig, VictimEndpoint, VictimServer

__version__ = "0.1.0"
