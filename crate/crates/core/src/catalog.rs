//! Mediated product catalog.
//!
//! Products are what the customer buys; components are what the individual
//! fulfillment targets provision. The catalog is the only place that knows
//! how one maps onto the other. Channels and customers only ever see a
//! [`ProductView`].
//!
//! The on-disk format is TOML, documented in `docs/formats.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parse::ParseError;

/// Target id reserved for the order-level billing sub-order.
pub const BILLING_TARGET: &str = "billing";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CatalogError {
    #[error("catalog parse error at {0}")]
    Parse(ParseError),
    #[error("unknown product `{0}`")]
    UnknownProduct(String),
}

/// How sub-orders addressed to a target are classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TargetKind {
    #[default]
    Service,
    WorkOrder,
    HumanTask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub id: String,
    #[serde(default)]
    pub kind: TargetKind,
}

/// Conjunction of `key=value` equality tests over order-line parameters.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Condition {
    pub terms: Vec<(String, String)>,
}

impl Condition {
    pub fn holds(&self, params: &BTreeMap<String, String>) -> bool {
        self.terms
            .iter()
            .all(|(k, v)| params.get(k).map(|p| p == v).unwrap_or(false))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(|(k, _)| k.as_str())
    }
}

impl TryFrom<Vec<String>> for Condition {
    type Error = String;

    fn try_from(raw: Vec<String>) -> Result<Self, String> {
        let terms = raw
            .iter()
            .map(|t| match t.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => {
                    Ok((k.trim().to_string(), v.trim().to_string()))
                }
                _ => Err(format!("condition term `{t}` is not key=value")),
            })
            .collect::<Result<_, _>>()?;
        Ok(Condition { terms })
    }
}

impl From<Condition> for Vec<String> {
    fn from(c: Condition) -> Self {
        c.terms.into_iter().map(|(k, v)| format!("{k}={v}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    #[serde(rename = "code")]
    pub component_code: String,
    #[serde(rename = "service")]
    pub service_code: String,
    #[serde(rename = "target")]
    pub target_id: String,
    #[serde(default)]
    pub billable: bool,
    #[serde(default, rename = "params")]
    pub param_keys: BTreeSet<String>,
    #[serde(default, rename = "requires")]
    pub requires_data: BTreeSet<String>,
    #[serde(default, rename = "provides")]
    pub provides_data: BTreeSet<String>,
    #[serde(default)]
    pub depends_on: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
}

impl ComponentSpec {
    pub fn included_for(&self, params: &BTreeMap<String, String>) -> bool {
        self.condition.as_ref().map(|c| c.holds(params)).unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductSpec {
    #[serde(rename = "code")]
    pub product_code: String,
    #[serde(rename = "name")]
    pub display_name: String,
    #[serde(default)]
    pub price: u64,
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
}

impl ProductSpec {
    /// Order-parameter keys the product understands: every component's
    /// `params` plus the keys its conditions test.
    pub fn parameter_keys(&self) -> BTreeSet<String> {
        let mut keys = BTreeSet::new();
        for c in &self.components {
            keys.extend(c.param_keys.iter().cloned());
            if let Some(cond) = &c.condition {
                keys.extend(cond.keys().map(str::to_string));
            }
        }
        keys
    }
}

/// Customer-facing projection of a product. Carries no fulfillment details.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductView {
    pub product_code: String,
    pub display_name: String,
    pub price: u64,
    pub parameters: Vec<String>,
    pub services: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Catalog {
    #[serde(default)]
    pub targets: Vec<TargetSpec>,
    #[serde(default)]
    pub products: Vec<ProductSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FindingRule {
    DuplicateProduct,
    DuplicateTarget,
    NoComponents,
    PriceWithoutBillable,
    DuplicateComponent,
    UnknownTarget,
    ReservedTarget,
    MissingBillingTarget,
    UnknownDependency,
    Cycle,
    UnsatisfiedData,
    DuplicateProvider,
}

impl FindingRule {
    pub fn id(self) -> &'static str {
        match self {
            FindingRule::DuplicateProduct => "DUPLICATE_PRODUCT",
            FindingRule::DuplicateTarget => "DUPLICATE_TARGET",
            FindingRule::NoComponents => "NO_COMPONENTS",
            FindingRule::PriceWithoutBillable => "PRICE_WITHOUT_BILLABLE",
            FindingRule::DuplicateComponent => "DUPLICATE_COMPONENT",
            FindingRule::UnknownTarget => "UNKNOWN_TARGET",
            FindingRule::ReservedTarget => "RESERVED_TARGET",
            FindingRule::MissingBillingTarget => "MISSING_BILLING_TARGET",
            FindingRule::UnknownDependency => "UNKNOWN_DEPENDENCY",
            FindingRule::Cycle => "CYCLE",
            FindingRule::UnsatisfiedData => "UNSATISFIED_DATA",
            FindingRule::DuplicateProvider => "DUPLICATE_PROVIDER",
        }
    }
}

impl fmt::Display for FindingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub product_code: Option<String>,
    pub rule: FindingRule,
    pub detail: String,
    /// Component codes forming the cycle, for [`FindingRule::Cycle`].
    pub cycle: Vec<String>,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.product_code {
            Some(p) => write!(f, "{} [{}]: {}", self.rule, p, self.detail),
            None => write!(f, "{}: {}", self.rule, self.detail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has(&self, rule: FindingRule) -> bool {
        self.findings.iter().any(|f| f.rule == rule)
    }
}

pub fn load_catalog(doc: &str) -> Result<Catalog, CatalogError> {
    if doc.trim().is_empty() {
        return Ok(Catalog::default());
    }
    toml::from_str(doc).map_err(|e| CatalogError::Parse(ParseError::from_toml(doc, &e)))
}

impl Catalog {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("catalog serializes")
    }

    pub fn product(&self, code: &str) -> Option<&ProductSpec> {
        self.products.iter().find(|p| p.product_code == code)
    }

    pub fn target(&self, id: &str) -> Option<&TargetSpec> {
        self.targets.iter().find(|t| t.id == id)
    }

    pub fn target_kind(&self, id: &str) -> TargetKind {
        self.target(id).map(|t| t.kind).unwrap_or_default()
    }

    pub fn target_ids(&self) -> BTreeSet<String> {
        self.targets.iter().map(|t| t.id.clone()).collect()
    }
}

/// Component-level dependency edges `(before, after)` for one product:
/// explicit `depends_on` plus producer-to-consumer data edges.
pub fn component_edges(product: &ProductSpec) -> BTreeSet<(String, String)> {
    let mut edges = BTreeSet::new();
    for c in &product.components {
        for d in &c.depends_on {
            edges.insert((d.clone(), c.component_code.clone()));
        }
        for key in &c.requires_data {
            for p in &product.components {
                if p.component_code != c.component_code && p.provides_data.contains(key) {
                    edges.insert((p.component_code.clone(), c.component_code.clone()));
                }
            }
        }
    }
    edges
}

/// Finds one cycle in a directed graph, returned as the list of nodes on it
/// starting from its smallest member.
pub(crate) fn find_cycle(nodes: &BTreeSet<String>, edges: &BTreeSet<(String, String)>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (a, b) in edges {
        succ.entry(a.as_str()).or_default().push(b.as_str());
    }
    let mut mark: BTreeMap<&str, Mark> = nodes.iter().map(|n| (n.as_str(), Mark::New)).collect();

    fn visit<'a>(
        n: &'a str,
        succ: &BTreeMap<&'a str, Vec<&'a str>>,
        mark: &mut BTreeMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        mark.insert(n, Mark::Active);
        stack.push(n);
        for &m in succ.get(n).map(|v| v.as_slice()).unwrap_or(&[]) {
            match mark.get(m).copied().unwrap_or(Mark::Done) {
                Mark::Active => {
                    let start = stack.iter().position(|s| *s == m).expect("active is on stack");
                    let mut cyc: Vec<String> = stack[start..].iter().map(|s| s.to_string()).collect();
                    let min = cyc
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.cmp(b.1))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    cyc.rotate_left(min);
                    return Some(cyc);
                }
                Mark::New => {
                    if let Some(c) = visit(m, succ, mark, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        mark.insert(n, Mark::Done);
        None
    }

    for n in nodes {
        if mark[n.as_str()] == Mark::New {
            let mut stack = Vec::new();
            if let Some(c) = visit(n.as_str(), &succ, &mut mark, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

pub fn validate_catalog(catalog: &Catalog) -> ValidationReport {
    let mut findings = Vec::new();
    let mut push = |product: Option<&str>, rule: FindingRule, detail: String, cycle: Vec<String>| {
        findings.push(Finding {
            product_code: product.map(str::to_string),
            rule,
            detail,
            cycle,
        })
    };

    let mut seen_targets = BTreeSet::new();
    for t in &catalog.targets {
        if !seen_targets.insert(t.id.as_str()) {
            push(None, FindingRule::DuplicateTarget, format!("target `{}` declared twice", t.id), vec![]);
        }
    }

    let mut seen_products = BTreeSet::new();
    let mut any_billable = false;
    for p in &catalog.products {
        let code = Some(p.product_code.as_str());
        if !seen_products.insert(p.product_code.as_str()) {
            push(code, FindingRule::DuplicateProduct, "product code declared twice".into(), vec![]);
        }
        if p.components.is_empty() {
            push(code, FindingRule::NoComponents, "product has no components".into(), vec![]);
            continue;
        }
        let billable = p.components.iter().any(|c| c.billable);
        any_billable |= billable;
        if p.price > 0 && !billable {
            push(
                code,
                FindingRule::PriceWithoutBillable,
                format!("price {} but no billable component", p.price),
                vec![],
            );
        }

        let mut codes = BTreeSet::new();
        for c in &p.components {
            if !codes.insert(c.component_code.clone()) {
                push(
                    code,
                    FindingRule::DuplicateComponent,
                    format!("component `{}` declared twice", c.component_code),
                    vec![],
                );
            }
        }
        for c in &p.components {
            if c.target_id == BILLING_TARGET {
                push(
                    code,
                    FindingRule::ReservedTarget,
                    format!("component `{}` targets the reserved billing target", c.component_code),
                    vec![],
                );
            } else if !seen_targets.contains(c.target_id.as_str()) {
                push(
                    code,
                    FindingRule::UnknownTarget,
                    format!("component `{}` targets undeclared `{}`", c.component_code, c.target_id),
                    vec![],
                );
            }
            for d in &c.depends_on {
                if !codes.contains(d) {
                    push(
                        code,
                        FindingRule::UnknownDependency,
                        format!("component `{}` depends on unknown `{}`", c.component_code, d),
                        vec![],
                    );
                }
            }
        }

        let mut providers: BTreeMap<&str, &str> = BTreeMap::new();
        for c in &p.components {
            for k in &c.provides_data {
                if let Some(prev) = providers.insert(k.as_str(), c.component_code.as_str()) {
                    push(
                        code,
                        FindingRule::DuplicateProvider,
                        format!("data key `{k}` provided by both `{prev}` and `{}`", c.component_code),
                        vec![],
                    );
                }
            }
        }

        let params = p.parameter_keys();
        for c in &p.components {
            for k in &c.requires_data {
                let by_sibling = p
                    .components
                    .iter()
                    .any(|o| o.component_code != c.component_code && o.provides_data.contains(k));
                if !by_sibling && !params.contains(k) {
                    push(
                        code,
                        FindingRule::UnsatisfiedData,
                        format!("component `{}` requires `{k}` which nothing provides", c.component_code),
                        vec![],
                    );
                }
            }
        }

        let edges: BTreeSet<_> = component_edges(p)
            .into_iter()
            .filter(|(a, b)| codes.contains(a) && codes.contains(b))
            .collect();
        if let Some(cycle) = find_cycle(&codes, &edges) {
            push(code, FindingRule::Cycle, format!("dependency cycle {}", cycle.join(" -> ")), cycle);
        }
    }

    if any_billable && !seen_targets.contains(BILLING_TARGET) {
        push(
            None,
            FindingRule::MissingBillingTarget,
            "billable components exist but no `billing` target is declared".into(),
            vec![],
        );
    }

    ValidationReport { findings }
}

pub fn customer_view(catalog: &Catalog, product_code: &str) -> Result<ProductView, CatalogError> {
    let p = catalog
        .product(product_code)
        .ok_or_else(|| CatalogError::UnknownProduct(product_code.to_string()))?;
    let services: BTreeSet<String> = p
        .components
        .iter()
        .filter(|c| c.billable)
        .map(|c| c.service_code.clone())
        .collect();
    Ok(ProductView {
        product_code: p.product_code.clone(),
        display_name: p.display_name.clone(),
        price: p.price,
        parameters: p.parameter_keys().into_iter().collect(),
        services: services.into_iter().collect(),
    })
}

/// Components of `product_code` included for the given order-line
/// parameters, sorted by component code.
pub fn resolve_components<'c>(
    catalog: &'c Catalog,
    product_code: &str,
    order_params: &BTreeMap<String, String>,
) -> Result<Vec<&'c ComponentSpec>, CatalogError> {
    let p = catalog
        .product(product_code)
        .ok_or_else(|| CatalogError::UnknownProduct(product_code.to_string()))?;
    let mut out: Vec<&ComponentSpec> = p.components.iter().filter(|c| c.included_for(order_params)).collect();
    out.sort_by(|a, b| a.component_code.cmp(&b.component_code));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MULTIPLAY: &str = r#"
[[targets]]
id = "broadband"

[[targets]]
id = "voice"

[[targets]]
id = "workforce"
kind = "WORK_ORDER"

[[targets]]
id = "billing"

[[products]]
code = "MULTIPLAY_1"
name = "Internet + Phone"
price = 60

[[products.components]]
code = "bb"
service = "BROADBAND"
target = "broadband"
billable = true
params = ["bb.speed"]
provides = ["cpe.mac"]

[[products.components]]
code = "visit"
service = "CPE_VISIT"
target = "workforce"
condition = ["cpe_required=true"]

[[products.components]]
code = "voice"
service = "TELEPHONY"
target = "voice"
billable = true
requires = ["cpe.mac"]
"#;

    fn params(kv: &[(&str, &str)]) -> BTreeMap<String, String> {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn comp(code: &str, target: &str) -> ComponentSpec {
        ComponentSpec {
            component_code: code.into(),
            service_code: code.to_uppercase(),
            target_id: target.into(),
            billable: false,
            param_keys: BTreeSet::new(),
            requires_data: BTreeSet::new(),
            provides_data: BTreeSet::new(),
            depends_on: BTreeSet::new(),
            condition: None,
        }
    }

    fn one_product(components: Vec<ComponentSpec>) -> Catalog {
        Catalog {
            targets: vec![
                TargetSpec { id: "t".into(), kind: TargetKind::Service },
                TargetSpec { id: "u".into(), kind: TargetKind::Service },
            ],
            products: vec![ProductSpec {
                product_code: "P".into(),
                display_name: "P".into(),
                price: 0,
                components,
            }],
        }
    }

    #[test]
    fn minimal_catalog_loads() {
        let doc = r#"
[[targets]]
id = "t"
[[products]]
code = "P"
name = "Probe"
[[products.components]]
code = "c"
service = "DIAG"
target = "t"
"#;
        let c = load_catalog(doc).unwrap();
        assert_eq!(c.products.len(), 1);
        assert!(validate_catalog(&c).is_clean());
    }

    #[test]
    fn empty_document_is_an_empty_catalog() {
        assert_eq!(load_catalog("").unwrap().products.len(), 0);
        assert_eq!(load_catalog("  \n").unwrap().products.len(), 0);
    }

    #[test]
    fn malformed_document_reports_position() {
        let err = load_catalog("[[products]]\ncode = \n").unwrap_err();
        match err {
            CatalogError::Parse(p) => assert_eq!(p.line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_product_parses_then_fails_validation() {
        let doc = format!("{MULTIPLAY}\n[[products]]\ncode = \"MULTIPLAY_1\"\nname = \"again\"\n[[products.components]]\ncode = \"x\"\nservice = \"X\"\ntarget = \"voice\"\n");
        let c = load_catalog(&doc).unwrap();
        assert_eq!(c.products.len(), 2);
        assert!(validate_catalog(&c).has(FindingRule::DuplicateProduct));
    }

    #[test]
    fn cycle_is_reported_with_its_members() {
        let mut a = comp("A", "t");
        let mut b = comp("B", "u");
        a.depends_on.insert("B".into());
        b.depends_on.insert("A".into());
        let report = validate_catalog(&one_product(vec![a, b]));
        let f = report.findings.iter().find(|f| f.rule == FindingRule::Cycle).unwrap();
        assert_eq!(f.cycle, vec!["A".to_string(), "B".to_string()]);
        assert_eq!(f.product_code.as_deref(), Some("P"));
    }

    #[test]
    fn mac_address_provided_by_sibling_is_clean() {
        let c = load_catalog(MULTIPLAY).unwrap();
        let r = validate_catalog(&c);
        assert!(r.is_clean(), "{:?}", r.findings);
    }

    #[test]
    fn unprovided_data_key_is_a_finding() {
        let mut a = comp("A", "t");
        a.requires_data.insert("nobody.has.it".into());
        let r = validate_catalog(&one_product(vec![a]));
        assert!(r.has(FindingRule::UnsatisfiedData));
    }

    #[test]
    fn requires_satisfied_by_order_parameter() {
        let mut a = comp("A", "t");
        a.requires_data.insert("msisdn".into());
        a.param_keys.insert("msisdn".into());
        assert!(validate_catalog(&one_product(vec![a])).is_clean());
    }

    #[test]
    fn structural_findings() {
        let mut a = comp("A", "nowhere");
        a.depends_on.insert("Z".into());
        a.provides_data.insert("k".into());
        let mut b = comp("B", "billing");
        b.provides_data.insert("k".into());
        b.billable = true;
        let mut cat = one_product(vec![a, b]);
        cat.products[0].price = 10;
        let r = validate_catalog(&cat);
        for rule in [
            FindingRule::UnknownTarget,
            FindingRule::UnknownDependency,
            FindingRule::DuplicateProvider,
            FindingRule::ReservedTarget,
            FindingRule::MissingBillingTarget,
        ] {
            assert!(r.has(rule), "missing {rule}: {:?}", r.findings);
        }
        let mut priced = one_product(vec![comp("A", "t")]);
        priced.products[0].price = 5;
        assert!(validate_catalog(&priced).has(FindingRule::PriceWithoutBillable));
    }

    #[test]
    fn customer_view_hides_fulfillment_details() {
        let c = load_catalog(MULTIPLAY).unwrap();
        let v = customer_view(&c, "MULTIPLAY_1").unwrap();
        assert_eq!(v.services, vec!["BROADBAND".to_string(), "TELEPHONY".to_string()]);
        assert_eq!(v.parameters, vec!["bb.speed".to_string(), "cpe_required".to_string()]);
        let rendered = serde_json::to_string(&v).unwrap();
        for t in c.target_ids() {
            assert!(!rendered.contains(&format!("\"{t}\"")), "leaked {t}");
        }
        assert!(!rendered.contains("cpe.mac"));
    }

    #[test]
    fn single_component_view() {
        let mut cat = one_product(vec![comp("A", "t")]);
        cat.products[0].components[0].billable = true;
        let v = customer_view(&cat, "P").unwrap();
        assert_eq!(v.services, vec!["A".to_string()]);
    }

    #[test]
    fn unknown_product() {
        let c = load_catalog(MULTIPLAY).unwrap();
        assert_eq!(customer_view(&c, "NOPE"), Err(CatalogError::UnknownProduct("NOPE".into())));
        assert!(resolve_components(&c, "NOPE", &BTreeMap::new()).is_err());
    }

    #[test]
    fn conditional_workforce_component() {
        let c = load_catalog(MULTIPLAY).unwrap();
        let with = resolve_components(&c, "MULTIPLAY_1", &params(&[("cpe_required", "true")])).unwrap();
        let codes: Vec<_> = with.iter().map(|c| c.component_code.as_str()).collect();
        assert_eq!(codes, vec!["bb", "visit", "voice"]);
        let without = resolve_components(&c, "MULTIPLAY_1", &params(&[("cpe_required", "false")])).unwrap();
        let codes: Vec<_> = without.iter().map(|c| c.component_code.as_str()).collect();
        assert_eq!(codes, vec!["bb", "voice"]);
        let absent = resolve_components(&c, "MULTIPLAY_1", &BTreeMap::new()).unwrap();
        assert_eq!(absent.len(), 2);
    }

    #[test]
    fn unconditional_product_resolves_everything() {
        let cat = one_product(vec![comp("b", "t"), comp("a", "u")]);
        let r = resolve_components(&cat, "P", &BTreeMap::new()).unwrap();
        let codes: Vec<_> = r.iter().map(|c| c.component_code.as_str()).collect();
        assert_eq!(codes, vec!["a", "b"]);
    }

    #[test]
    fn bad_condition_term_is_a_parse_error() {
        let doc = MULTIPLAY.replace("cpe_required=true", "cpe_required");
        assert!(matches!(load_catalog(&doc), Err(CatalogError::Parse(_))));
    }

    #[test]
    fn toml_round_trip() {
        let c = load_catalog(MULTIPLAY).unwrap();
        assert_eq!(load_catalog(&c.to_toml()).unwrap(), c);
    }
}
