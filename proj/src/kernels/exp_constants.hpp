#pragma once

// Cephes-style exp: rational approximation on |r| <= ln2/2 after a
// two-constant range reduction, then exact scaling by 2^n split in two
// factors so every intermediate power stays normal.

namespace mortensen::simd::detail {

inline constexpr double kLog2e = 1.4426950408889634073599;
inline constexpr double kLn2Hi = 6.93145751953125E-1;
inline constexpr double kLn2Lo = 1.42860682030941723212E-6;

inline constexpr double kExpP0 = 1.26177193074810590878E-4;
inline constexpr double kExpP1 = 3.02994407707441961300E-2;
inline constexpr double kExpP2 = 9.99999999999999999910E-1;
inline constexpr double kExpQ0 = 3.00198505138664455042E-6;
inline constexpr double kExpQ1 = 2.52448340349684104192E-3;
inline constexpr double kExpQ2 = 2.27265548208155028766E-1;
inline constexpr double kExpQ3 = 2.00000000000000000009E0;

inline constexpr double kExpMax = 709.78271289338397;
inline constexpr double kExpMin = -708.39641853226408;

// 2^52: adding a small non-negative integer k produces a double whose low
// mantissa bits equal k.
inline constexpr double kMantissaShift = 4503599627370496.0;

}  // namespace mortensen::simd::detail
