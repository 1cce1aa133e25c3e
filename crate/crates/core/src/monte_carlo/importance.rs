use crate::bayesnet::Observed;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::variational::LatentBundle;

/// Log of the importance-sampling estimate of p(x):
/// `logsumexp_k(log p(x, zₖ) − log q(zₖ)) − log K` over the bundle's sample axis.
pub fn is_loglikelihood(
    log_joint: impl FnOnce(&Observed) -> Result<Tensor>,
    observed: &Observed,
    latent: &LatentBundle,
) -> Result<Tensor> {
    if latent.sample_axis().is_none() {
        return Err(Error::Contract("is_loglikelihood needs a sample axis".into()));
    }
    let obj = crate::variational::iw_objective(log_joint, observed, latent)?;
    Ok(obj.bound()?.stop_gradient())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Array;

    #[test]
    fn single_prior_sample_gives_likelihood_term() {
        let z = Tensor::constant(Array::from_vec(vec![0.3]));
        let lp_z = Tensor::constant(Array::from_vec(vec![-1.1]));
        let latent = LatentBundle::new(Some(0)).with("z", z, lp_z.clone());
        let ll = is_loglikelihood(
            |_| Ok(Tensor::constant(Array::from_vec(vec![-1.1 - 2.5]))),
            &Observed::new(),
            &latent,
        )
        .unwrap();
        assert!((ll.item().unwrap() + 2.5).abs() < 1e-12);
        let no_axis = LatentBundle::new(None).with("z", Tensor::scalar(0.0), Tensor::scalar(0.0));
        assert!(matches!(
            is_loglikelihood(|_| Ok(Tensor::scalar(0.0)), &Observed::new(), &no_axis),
            Err(Error::Contract(_))
        ));
    }
}
