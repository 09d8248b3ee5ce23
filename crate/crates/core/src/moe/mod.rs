//! Two-headed router, top-K dispatch with capacity, the auxiliary losses,
//! dense-to-MoE expansion and merging of the shared feed-forward.

mod analysis;
mod config;
mod dispatch;
mod expand;
mod layer;
mod loss;

pub use analysis::{routing_stats_from_rows, RoutingAccumulator, RoutingStats};
pub use config::{capacity, K1Weighting, MoeConfig, SecondExpertRule, Sharing, Variant};
pub use dispatch::{plan_dispatch_gshard, plan_dispatch_switch, Choice, DispatchPlan, LoadStats, StatsTiming, Weighting};
pub use expand::{expand_dense_to_moe, merge_shared_into_experts};
pub use layer::{moe_forward, route, ExpertVars, MergedPart, RouteOutput, RouterVars};
pub use loss::{
    balance_loss, balance_loss_graph, balance_loss_gshard, balance_loss_switch, error_type_loss, error_type_loss_probs,
    total_loss, total_loss_graph, LossBreakdown,
};
