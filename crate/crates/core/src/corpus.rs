//! Seeded scenario corpora: collision scenes from the template catalog and
//! everyday lane-following scenes.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, substream};
use crate::scenario::{DatasetEntry, MapRegion, Split};
use crate::structured::{interpret, PromptTemplate, TemplateCatalog, TemplateClient};
use crate::synth::{random_regular_scene, synthesize, SynthesisConfig};

/// A scenario that could not be produced, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub id: String,
    pub template: String,
    pub reason: String,
}

fn split_for(rng: &mut crate::rng::Rng, test_fraction: f64) -> Split {
    if rng.gen::<f64>() < test_fraction {
        Split::Test
    } else {
        Split::Train
    }
}

/// Draws `count` template expansions, runs each prompt through the
/// interpreter and synthesizes it on `map`.
///
/// Scenario `i` depends only on `(seed, i)`. Templates that do not list
/// `map_name` are skipped unless named explicitly through `only`; if no
/// template lists the map at all, every template is eligible.
#[allow(clippy::too_many_arguments)]
pub fn generate_collision_corpus(
    catalog: &TemplateCatalog,
    map_name: &str,
    map: &MapRegion,
    count: usize,
    seed: u64,
    only: Option<&str>,
    cfg: &SynthesisConfig,
    test_fraction: f64,
) -> Result<(Vec<DatasetEntry>, Vec<Failure>)> {
    let pool: Vec<&PromptTemplate> = match only {
        Some(name) => vec![catalog
            .get(name)
            .ok_or_else(|| Error::Template(format!("unknown template {name:?}")))?],
        None => {
            let named: Vec<_> = catalog.templates.iter().filter(|t| t.maps.iter().any(|m| m == map_name)).collect();
            if named.is_empty() {
                log::warn!("no template lists map {map_name:?}; drawing from the whole catalog");
                catalog.templates.iter().collect()
            } else {
                named
            }
        }
    };
    if pool.is_empty() {
        return Err(Error::Template("the template catalog is empty".into()));
    }
    let client = TemplateClient::new(catalog)?;
    let mut entries = Vec::with_capacity(count);
    let mut failures = Vec::new();
    for i in 0..count {
        let mut rng = substream(seed, i as u64);
        let template = pool[rng.gen_range(0..pool.len())];
        let bindings = template.all_bindings();
        let b = bindings.choose(&mut rng).expect("a template has at least one binding");
        let split = split_for(&mut rng, test_fraction);
        let id = format!("collision_{i:05}");
        let cfg = SynthesisConfig {
            rng_seed: derive_seed(seed, i as u64),
            ..cfg.clone()
        };
        let made = template
            .expand(b)
            .and_then(|(prompt, _)| interpret(&prompt, &client))
            .and_then(|scene| synthesize(&scene, map, &cfg));
        match made {
            Ok(scenario) => entries.push(DatasetEntry { id, split, scenario }),
            Err(e) => {
                log::warn!("{id} ({}): {e}", template.name);
                failures.push(Failure {
                    id,
                    template: template.name.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok((entries, failures))
}

/// `count` random everyday scenes on `map`.
pub fn generate_regular_corpus(
    map: &MapRegion,
    count: usize,
    seed: u64,
    cfg: &SynthesisConfig,
    test_fraction: f64,
) -> Result<Vec<DatasetEntry>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = substream(seed, i as u64);
        let scene = random_regular_scene(map, cfg, &mut rng);
        let split = split_for(&mut rng, test_fraction);
        let cfg = SynthesisConfig {
            rng_seed: derive_seed(seed, i as u64),
            ..cfg.clone()
        };
        out.push(DatasetEntry {
            id: format!("regular_{i:05}"),
            split,
            scenario: synthesize(&scene, map, &cfg)?,
        });
    }
    Ok(out)
}
