pub mod attack;
pub mod covert;
#[cfg(feature = "hw")]
pub mod hw;
pub mod nicv;
pub mod simulate;
