//! Product and work-order decomposition.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::catalog::{component_edges, resolve_components, Catalog, CatalogError, ComponentSpec, TargetKind, BILLING_TARGET};
use crate::fulfillment::platform::{CUSTOMER_ADDRESS_KEY, CUSTOMER_ID_KEY};
use crate::order::{CanonicalOrder, Item, SubOrder, SubOrderKind, SubOrderState};

/// Billing item parameter carrying the line quantity.
pub const QTY_PARAM: &str = "qty";

/// Data keys every sub-order can read without a producer.
pub const ORDER_LEVEL_KEYS: [&str; 2] = [CUSTOMER_ID_KEY, CUSTOMER_ADDRESS_KEY];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecomposeError {
    #[error("unknown product `{0}`")]
    UnknownProduct(String),
    #[error("sub-order {suborder_id} requires `{key}` but nothing provides it")]
    UnsatisfiableData { suborder_id: String, key: String },
}

impl From<CatalogError> for DecomposeError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::UnknownProduct(p) => DecomposeError::UnknownProduct(p),
            CatalogError::Parse(p) => DecomposeError::UnknownProduct(p.to_string()),
        }
    }
}

pub fn line_suborder_id(order_id: &str, line_id: &str, target_id: &str) -> String {
    format!("{order_id}-{line_id}-{target_id}")
}

pub fn billing_suborder_id(order_id: &str) -> String {
    format!("{order_id}-billing")
}

fn kind_for(catalog: &Catalog, target_id: &str) -> SubOrderKind {
    match catalog.target_kind(target_id) {
        TargetKind::Service => SubOrderKind::Service,
        TargetKind::WorkOrder => SubOrderKind::WorkOrder,
        TargetKind::HumanTask => SubOrderKind::HumanTask,
    }
}

fn item_for(line_id: &str, c: &ComponentSpec, line_params: &BTreeMap<String, String>) -> Item {
    Item {
        line_id: line_id.to_string(),
        component_code: c.component_code.clone(),
        service_code: c.service_code.clone(),
        params: line_params
            .iter()
            .filter(|(k, _)| c.param_keys.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    }
}

/// Splits an order into sub-orders: one per line per target, plus one
/// order-level billing sub-order when anything is billable. Result is sorted
/// by suborder id.
pub fn decompose(order: &CanonicalOrder, catalog: &Catalog) -> Result<Vec<SubOrder>, DecomposeError> {
    let mut out: BTreeMap<String, SubOrder> = BTreeMap::new();
    let mut billing_items = Vec::new();

    for line in &order.lines {
        let comps = resolve_components(catalog, &line.product_code, &line.params)?;
        let product = catalog.product(&line.product_code).expect("resolved above");
        let included: BTreeSet<&str> = comps.iter().map(|c| c.component_code.as_str()).collect();
        let sub_of: BTreeMap<&str, String> = comps
            .iter()
            .map(|c| (c.component_code.as_str(), line_suborder_id(&order.order_id, &line.line_id, &c.target_id)))
            .collect();

        let mut groups: BTreeMap<&str, Vec<&ComponentSpec>> = BTreeMap::new();
        for c in &comps {
            groups.entry(c.target_id.as_str()).or_default().push(c);
            if c.billable {
                let mut it = item_for(&line.line_id, c, &line.params);
                it.params.insert(QTY_PARAM.into(), line.qty.to_string());
                billing_items.push(it);
            }
        }

        for (target, group) in &groups {
            let id = line_suborder_id(&order.order_id, &line.line_id, target);
            let provides: BTreeSet<String> = group.iter().flat_map(|c| c.provides_data.iter().cloned()).collect();
            let requires: BTreeSet<String> = group
                .iter()
                .flat_map(|c| c.requires_data.iter().cloned())
                .filter(|k| !provides.contains(k))
                .collect();
            out.insert(
                id.clone(),
                SubOrder {
                    suborder_id: id.clone(),
                    order_id: order.order_id.clone(),
                    line_id: Some(line.line_id.clone()),
                    target_id: target.to_string(),
                    kind: kind_for(catalog, target),
                    items: group.iter().map(|c| item_for(&line.line_id, c, &line.params)).collect(),
                    requires_data: requires,
                    provides_data: provides,
                    depends_on: BTreeSet::new(),
                    state: SubOrderState::Pending,
                },
            );
        }

        for (a, b) in component_edges(product) {
            if !included.contains(a.as_str()) || !included.contains(b.as_str()) {
                continue;
            }
            let (sa, sb) = (&sub_of[a.as_str()], &sub_of[b.as_str()]);
            if sa != sb {
                out.get_mut(sb).expect("grouped").depends_on.insert(sa.clone());
            }
        }

        // Every remaining requirement needs a producer on this line, a line
        // parameter, or an order-level key.
        for target in groups.keys() {
            let id = line_suborder_id(&order.order_id, &line.line_id, target);
            let so = &out[&id];
            for key in &so.requires_data {
                let produced = comps
                    .iter()
                    .any(|c| c.target_id != *target && c.provides_data.contains(key));
                if !produced && !line.params.contains_key(key) && !ORDER_LEVEL_KEYS.contains(&key.as_str()) {
                    return Err(DecomposeError::UnsatisfiableData {
                        suborder_id: id.clone(),
                        key: key.clone(),
                    });
                }
            }
        }
    }

    if !billing_items.is_empty() {
        let id = billing_suborder_id(&order.order_id);
        let deps: BTreeSet<String> = out.keys().cloned().collect();
        out.insert(
            id.clone(),
            SubOrder {
                suborder_id: id,
                order_id: order.order_id.clone(),
                line_id: None,
                target_id: BILLING_TARGET.to_string(),
                kind: SubOrderKind::Billing,
                items: billing_items,
                requires_data: BTreeSet::new(),
                provides_data: BTreeSet::new(),
                depends_on: deps,
                state: SubOrderState::Pending,
            },
        );
    }
    Ok(out.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_catalog;
    use crate::order::{ChannelId, CustomerRef, OrderLine};

    const CAT: &str = r#"
[[targets]]
id = "broadband"
[[targets]]
id = "voice"
[[targets]]
id = "billing"
[[targets]]
id = "workforce"
kind = "WORK_ORDER"
[[targets]]
id = "diag"

[[products]]
code = "MULTIPLAY_1"
name = "Multi-play"
price = 40
[[products.components]]
code = "bb"
service = "BROADBAND"
target = "broadband"
billable = true
params = ["bb.speed"]
provides = ["cpe.mac"]
[[products.components]]
code = "visit"
service = "INSTALL_VISIT"
target = "workforce"
requires = ["cpe.mac"]
condition = ["cpe_required=true"]
[[products.components]]
code = "voice"
service = "TELEPHONY"
target = "voice"
billable = true
requires = ["cpe.mac"]

[[products]]
code = "DIAG"
name = "Line check"
price = 0
[[products.components]]
code = "d"
service = "LINE_TEST"
target = "diag"

[[products]]
code = "NEEDY"
name = "Needs a key"
[[products.components]]
code = "n"
service = "N"
target = "diag"
requires = ["x.key"]
"#;

    type Line<'a> = (&'a str, &'a str, &'a [(&'a str, &'a str)]);

    fn order(lines: &[Line]) -> CanonicalOrder {
        CanonicalOrder {
            order_id: "O1".into(),
            channel_id: ChannelId::Pos,
            customer: CustomerRef {
                customer_id: "C1".into(),
                credit_limit: 100,
                premises_address: "a, Skopje".into(),
                cpe_capabilities: BTreeSet::new(),
                contract_terms: BTreeSet::new(),
            },
            lines: lines
                .iter()
                .map(|(l, p, params)| OrderLine {
                    line_id: l.to_string(),
                    product_code: p.to_string(),
                    qty: 1,
                    params: params.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
                })
                .collect(),
            created_at: 0,
        }
    }

    #[test]
    fn multiplay_gives_three_suborders() {
        let cat = load_catalog(CAT).unwrap();
        let subs = decompose(&order(&[("L1", "MULTIPLAY_1", &[("bb.speed", "100")])]), &cat).unwrap();
        let ids: Vec<&str> = subs.iter().map(|s| s.suborder_id.as_str()).collect();
        assert_eq!(ids, ["O1-L1-broadband", "O1-L1-voice", "O1-billing"]);
        let kinds: Vec<SubOrderKind> = subs.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, [SubOrderKind::Service, SubOrderKind::Service, SubOrderKind::Billing]);
        assert_eq!(subs[1].depends_on, BTreeSet::from(["O1-L1-broadband".to_string()]));
        assert_eq!(subs[2].depends_on.len(), 2);
        assert_eq!(subs[2].items.len(), 2);
        assert_eq!(subs[0].items[0].params["bb.speed"], "100");
        assert!(!subs[1].items[0].params.contains_key("bb.speed"));
        assert_eq!(subs[2].items[0].params[QTY_PARAM], "1");
    }

    #[test]
    fn condition_adds_work_order() {
        let cat = load_catalog(CAT).unwrap();
        let subs = decompose(&order(&[("L1", "MULTIPLAY_1", &[("cpe_required", "true")])]), &cat).unwrap();
        let visit = subs.iter().find(|s| s.target_id == "workforce").unwrap();
        assert_eq!(visit.kind, SubOrderKind::WorkOrder);
        assert!(visit.depends_on.contains("O1-L1-broadband"));
    }

    #[test]
    fn non_billable_product_has_no_billing() {
        let cat = load_catalog(CAT).unwrap();
        let subs = decompose(&order(&[("L1", "DIAG", &[])]), &cat).unwrap();
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].kind, SubOrderKind::Service);
    }

    #[test]
    fn errors() {
        let cat = load_catalog(CAT).unwrap();
        assert_eq!(
            decompose(&order(&[("L1", "NOPE", &[])]), &cat),
            Err(DecomposeError::UnknownProduct("NOPE".into()))
        );
        assert!(matches!(
            decompose(&order(&[("L1", "NEEDY", &[])]), &cat),
            Err(DecomposeError::UnsatisfiableData { .. })
        ));
        assert!(decompose(&order(&[("L1", "NEEDY", &[("x.key", "1")])]), &cat).is_ok());
    }

    #[test]
    fn two_lines_keep_separate_suborders() {
        let cat = load_catalog(CAT).unwrap();
        let subs = decompose(&order(&[("L1", "MULTIPLAY_1", &[]), ("L2", "MULTIPLAY_1", &[])]), &cat).unwrap();
        assert_eq!(subs.len(), 5);
        let billing = subs.last().unwrap();
        assert_eq!(billing.items.len(), 4);
        assert_eq!(billing.depends_on.len(), 4);
    }
}
