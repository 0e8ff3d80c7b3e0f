"""Sequential recommendation with linear dispatcher attention and product-key interest memory."""
