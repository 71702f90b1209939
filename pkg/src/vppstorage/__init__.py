"""Multi-agent scheduling of electric energy storage in a virtual power plant.

Agents generate feasible operational schedules for their storage with a
multi-criteria evolutionary algorithm and negotiate, fully distributed, which
schedule each of them commits to so that the cluster sum tracks a target
schedule.
"""

from .storage import (IntervalSpec, StorageParams, StorageState, clip_power,
                      feasible_soc_range, power_for_transition, step_soc)
from .schedule import (CoupledGeneratorProfile, LoadStateSchedule,
                       OperationalSchedule, PowerSchedule, Strategy, repair,
                       to_load_state, to_operational_schedule, to_power, validate)
from .objectives import (AgentEnv, FitnessPair, LoadProfile, LocalObjective,
                         MarketPrices, PeakTariff, arbitrage_fitness,
                         death_penalty_wrap, global_fitness, local_sdm_fitness,
                         lq_metric, normalize_global, normalize_local,
                         peak_shaving_fitness)
from .gabhyme import EaParams, EvolutionRun, Individual, MgbmState, run
from .cohda import CohdaAgent, Decider, NegotiationMessage, ScheduleSet, pre_optimize
from .simnet import (DeliverySchedule, NegotiationSetup, RunRecord, Topology,
                     build_topology, replay, run_negotiation)

__version__ = "0.1.0"
