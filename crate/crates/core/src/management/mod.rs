//! Order management: validation, decomposition, planning and orchestration.

pub mod decompose;
pub mod orchestrator;
pub mod plan;
pub mod rules;

pub use decompose::{billing_suborder_id, decompose, line_suborder_id, DecomposeError};
pub use plan::{build_plan, initial_bindings, ExecutionPlan, PlanError};
pub use rules::{validate_order, Environment, Facts, RuleCheck, RuleFailure, RuleSet, ValidationResult, ValidationRule};
pub use orchestrator::{Engine, EngineConfig, EngineError, EngineOptions};
