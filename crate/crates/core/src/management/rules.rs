//! Business and technical validation rules.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::order::{CanonicalOrder, CustomerRef};
use crate::parse::ParseError;

/// Line parameter that says new equipment ships with the order.
pub const CPE_REQUIRED_PARAM: &str = "cpe_required";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuleKind {
    Business,
    Technical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum RuleCheck {
    /// Order total (catalog price times quantity) within the customer's limit.
    CreditLimit,
    /// Premises city must be in the coverage list.
    ServiceAvailability,
    /// Customer equipment must carry the capabilities each product needs,
    /// unless the line ships new equipment.
    CpeCompatibility,
    /// None of the customer's contract terms may be blocked.
    ContractTerms {
        #[serde(default)]
        blocked: BTreeSet<String>,
    },
}

impl RuleCheck {
    pub fn rule_id(&self) -> &'static str {
        match self {
            RuleCheck::CreditLimit => "CREDIT_LIMIT",
            RuleCheck::ServiceAvailability => "SERVICE_AVAILABILITY",
            RuleCheck::CpeCompatibility => "CPE_COMPATIBILITY",
            RuleCheck::ContractTerms { .. } => "CONTRACT_TERMS",
        }
    }

    pub fn default_kind(&self) -> RuleKind {
        match self {
            RuleCheck::CreditLimit | RuleCheck::ContractTerms { .. } => RuleKind::Business,
            RuleCheck::ServiceAvailability | RuleCheck::CpeCompatibility => RuleKind::Technical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationRule {
    #[serde(flatten)]
    pub check: RuleCheck,
    pub kind: Option<RuleKind>,
    /// Overrides the generated failure message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ValidationRule {
    pub fn new(check: RuleCheck) -> Self {
        Self {
            check,
            kind: None,
            message: None,
        }
    }

    pub fn rule_id(&self) -> &'static str {
        self.check.rule_id()
    }

    pub fn kind(&self) -> RuleKind {
        self.kind.unwrap_or_else(|| self.check.default_kind())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    #[serde(default)]
    pub rules: Vec<ValidationRule>,
}

impl RuleSet {
    pub fn from_toml(doc: &str) -> Result<Self, ParseError> {
        toml::from_str(doc).map_err(|e| ParseError::from_toml(doc, &e))
    }

    /// Every shipped rule with default parameters.
    pub fn standard() -> Self {
        Self {
            rules: vec![
                ValidationRule::new(RuleCheck::CreditLimit),
                ValidationRule::new(RuleCheck::ServiceAvailability),
                ValidationRule::new(RuleCheck::CpeCompatibility),
                ValidationRule::new(RuleCheck::ContractTerms {
                    blocked: BTreeSet::new(),
                }),
            ],
        }
    }
}

/// Environment facts, snapshotted from a file rather than queried live.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Facts {
    /// Cities with service coverage.
    #[serde(default)]
    pub coverage: BTreeSet<String>,
    /// product code -> CPE capability tags it needs
    #[serde(default)]
    pub cpe: BTreeMap<String, BTreeSet<String>>,
}

impl Facts {
    pub fn from_toml(doc: &str) -> Result<Self, ParseError> {
        toml::from_str(doc).map_err(|e| ParseError::from_toml(doc, &e))
    }
}

/// What rules may look at besides the order itself.
#[derive(Debug, Clone, Copy)]
pub struct Environment<'a> {
    pub facts: &'a Facts,
    pub catalog: &'a Catalog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleFailure {
    pub rule_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub passed: bool,
    pub failures: Vec<RuleFailure>,
}

/// City part of an address: the text after the last comma.
pub fn city_of(address: &str) -> &str {
    address.rsplit(',').next().unwrap_or("").trim()
}

pub fn order_total(order: &CanonicalOrder, catalog: &Catalog) -> u64 {
    order
        .lines
        .iter()
        .map(|l| catalog.product(&l.product_code).map(|p| p.price).unwrap_or(0) * u64::from(l.qty))
        .sum()
}

fn check(rule: &ValidationRule, order: &CanonicalOrder, customer: &CustomerRef, env: Environment<'_>) -> Option<String> {
    match &rule.check {
        RuleCheck::CreditLimit => {
            let total = order_total(order, env.catalog);
            (total > customer.credit_limit)
                .then(|| format!("order total {total} exceeds credit limit {}", customer.credit_limit))
        }
        RuleCheck::ServiceAvailability => {
            let city = city_of(&customer.premises_address);
            (!env.facts.coverage.contains(city)).then(|| format!("no service coverage in `{city}`"))
        }
        RuleCheck::CpeCompatibility => {
            let mut problems = Vec::new();
            for line in &order.lines {
                if line.params.get(CPE_REQUIRED_PARAM).map(String::as_str) == Some("true") {
                    continue;
                }
                let needed = env.facts.cpe.get(&line.product_code).cloned().unwrap_or_default();
                let missing: Vec<&String> = needed.difference(&customer.cpe_capabilities).collect();
                if !missing.is_empty() {
                    problems.push(format!("line {} needs CPE capabilities {missing:?}", line.line_id));
                }
            }
            (!problems.is_empty()).then(|| problems.join("; "))
        }
        RuleCheck::ContractTerms { blocked } => {
            let hit: Vec<&String> = customer.contract_terms.intersection(blocked).collect();
            (!hit.is_empty()).then(|| format!("blocked contract terms {hit:?}"))
        }
    }
}

/// Evaluates every rule (no short-circuit). Failures are sorted by rule id.
pub fn validate_order(
    order: &CanonicalOrder,
    customer: &CustomerRef,
    rules: &RuleSet,
    env: Environment<'_>,
) -> ValidationResult {
    let mut failures: Vec<RuleFailure> = rules
        .rules
        .iter()
        .filter_map(|r| {
            check(r, order, customer, env).map(|generated| RuleFailure {
                rule_id: r.rule_id().to_string(),
                message: r.message.clone().unwrap_or(generated),
            })
        })
        .collect();
    failures.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));
    ValidationResult {
        passed: failures.is_empty(),
        failures,
    }
}
