use chmm::simulation::design;
use chmm::{decode, decoding_error, fit, simulate, CouplingKind, EmissionFamily, FitOptions, ModelSpec};

fn main() -> chmm::Result<()> {
    let truth = design::coupled_truth(1.5);
    let sim = simulate(&truth, 1000, 7)?;

    let spec = ModelSpec::uniform(2, 2, CouplingKind::CartesianFull, EmissionFamily::Normal)?;
    let result = fit(&spec, &sim.data, &FitOptions::default())?;
    println!("loglik {:.3}, AIC {:.3}", result.loglik, result.aic);
    for p in &result.natural {
        println!("{:<24} {:>10.4} {:>10}", p.name, p.value, p.std_error.map_or("NA".into(), |se| format!("{se:.4}")));
    }

    let path = decode(&result.model, &sim.data)?;
    println!("decoding error: {:.2}%", decoding_error(&path.per_chain, &sim.per_chain)?);
    Ok(())
}
