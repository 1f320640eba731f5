//! Wavelength/frequency conversions. Wavelengths are in nm, frequencies in Hz.

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn wavelength_to_frequency(wavelength_nm: f64) -> f64 {
    SPEED_OF_LIGHT / (wavelength_nm * 1e-9)
}

pub fn frequency_to_wavelength(frequency_hz: f64) -> f64 {
    SPEED_OF_LIGHT / frequency_hz * 1e9
}

/// Width in Hz of a narrow band of `width_nm` centred at `center_nm` (Δν = c·Δλ/λ²).
pub fn bandwidth_nm_to_hz(center_nm: f64, width_nm: f64) -> f64 {
    SPEED_OF_LIGHT * (width_nm * 1e-9) / (center_nm * 1e-9).powi(2)
}

/// Inverse of [`bandwidth_nm_to_hz`].
pub fn bandwidth_hz_to_nm(center_nm: f64, width_hz: f64) -> f64 {
    width_hz * (center_nm * 1e-9).powi(2) / SPEED_OF_LIGHT * 1e9
}

pub fn db_to_transmittance(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}
