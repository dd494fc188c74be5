"""Split federated LoRA fine-tuning over a wireless FDMA uplink.

Channel simulation, Lambert-W bandwidth allocation, Lyapunov-queue device
scheduling, a desk-scale split-LoRA training surrogate and convergence-bound
tooling.
"""

from wirelessfedft.allocation import (
    Allocation,
    AllocationProblem,
    InfeasibleDelay,
    lambert_w_m1,
    min_delay,
    required_bandwidth,
)
from wirelessfedft.channel import (
    ChannelConfig,
    ChannelSnapshot,
    achievable_rate,
    deploy_devices,
    sample_gains,
    transmission_delay,
)
from wirelessfedft.scheduler import (
    ScheduleDecision,
    SchedulerConfig,
    VirtualQueue,
    objective,
    schedule,
    schedule_aaba,
    schedule_all_in,
    schedule_gs,
    schedule_online,
    update_queue,
    zeta,
)

__version__ = "0.1.0"
