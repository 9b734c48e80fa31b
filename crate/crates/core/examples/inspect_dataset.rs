//! Loads a dataset and prints split sizes, class histograms and the first
//! training image as ASCII.
//!
//!     cargo run --release --example inspect_dataset -- [mnist|cifar10]

use betaprune::data;
use betaprune::nn::DatasetKind;

fn main() -> betaprune::Result<()> {
    let kind: DatasetKind = std::env::args().nth(1).map_or("mnist".to_string(), |s| s).parse()?;
    let (train, test) = data::load(kind, data::default_data_dir())?;
    for ds in [&train, &test] {
        let mut hist = [0usize; 10];
        ds.labels().iter().for_each(|&l| hist[l as usize] += 1);
        println!("{:?}: {} images of {:?}, classes {hist:?}", ds.split, ds.len(), ds.image_shape());
    }

    let [c, h, w] = train.image_shape();
    let img = train.image(0);
    println!("first training image, label {}:", train.labels()[0]);
    for y in 0..h {
        let line: String = (0..w)
            .map(|x| {
                let v = (0..c).map(|ch| img[(ch * h + y) * w + x]).sum::<f32>() / c as f32;
                [' ', '.', ':', '+', '#'][((v * 4.99) as usize).min(4)]
            })
            .collect();
        println!("  {line}");
    }
    Ok(())
}
